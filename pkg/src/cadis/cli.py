"""Command-line pipeline: ``cadis <command> --key value ...``.

Every command prints one JSON line summarising what it did and writes its
artifacts under ``--out``. Exit status: 0 success, 1 invalid input or flags,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import TrainConfig, get_profile, profile_diff, read_train_config
from .errors import CadisError, InputError, ValidationError
from .losses import LossWeights

log = logging.getLogger("cadis")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class UsageError(ValidationError):
    pass


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True, default=str))


def _cache_dir():
    return os.environ.get("CADIS_CACHE") or None


def _train_config(args, phase: str) -> TrainConfig:
    """Profile defaults, then ``--config`` file, then explicit flags (flag wins)."""
    prof = get_profile(args.profile)
    cfg = getattr(prof, phase)
    if args.config:
        cfg = read_train_config(args.config, cfg)
    updates = {"phase": phase}
    for flag in ("epochs", "batch_size", "lr", "seed"):
        v = getattr(args, flag, None)
        if v is not None:
            updates[flag] = v
    if getattr(args, "precision", None):
        updates["precision"] = args.precision
    if getattr(args, "loss", None):
        updates["loss_weights"] = LossWeights.from_terms(args.loss, cfg.loss_weights)
    if getattr(args, "no_causal_layer", False):
        updates["causal_layer_enabled"] = False
    if getattr(args, "saturating", False):
        updates["saturating"] = True
    if getattr(args, "save_every", None) is not None:
        updates["save_every"] = args.save_every
    return replace(cfg, **updates)


def _feat_net(args, cfg):
    from .train import make_feature_net

    kind = "vgg19" if args.vgg_weights else "desk"
    return make_feature_net(cfg, kind, args.vgg_weights)


def _manifest(path):
    from .degrade import Manifest

    m = Manifest.read(path)
    m.check(check_files=True)
    return m


# --- commands ------------------------------------------------------------------------------------


def cmd_build_dataset(args) -> dict:
    from .degrade import DegradationProtocol, build_dataset, split_manifest
    from .desk import attach_pseudo_mos, build_desk_benchmark

    out = Path(args.out)
    if args.desk:
        m = build_desk_benchmark(out, n_pristine=args.n_pristine, seed=args.seed, pseudo_mos=not args.no_mos)
    else:
        if not args.pristine:
            raise UsageError("either --pristine DIR or --desk is required")
        protocol = DegradationProtocol.from_file(args.protocol) if args.protocol else DegradationProtocol()
        m = build_dataset(args.pristine, protocol, out, args.seed, workers=args.workers)
        m = split_manifest(m, _ratios(args.ratios), args.seed)
        if args.pseudo_mos:
            m = attach_pseudo_mos(m)
        m.write(out / "manifest.jsonl")
    counts = {s: len(m.subset(s).pristine()) for s in ("pretrain", "finetune", "test")}
    return {"manifest": str(out / "manifest.jsonl"), "records": len(m), "pristine_per_split": counts}


def _ratios(text: str):
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError(f"--ratios must be three comma-separated numbers, got {text!r}") from exc
    if len(vals) != 3:
        raise UsageError("--ratios needs exactly three values (pretrain,finetune,test)")
    return vals


def cmd_pretrain(args) -> dict:
    from .train import pretrain

    cfg = _train_config(args, "pretrain")
    prof = get_profile(args.profile)
    ckpt = pretrain(_manifest(args.manifest), cfg, prof.net, args.out, _feat_net(args, cfg))
    return {"checkpoint": str(Path(args.out) / "final"), "epochs": ckpt.epoch, "final_loss": ckpt.history[-1]["total"]}


def cmd_finetune(args) -> dict:
    from .train import Checkpoint, finetune

    cfg = _train_config(args, "finetune")
    ckpt = finetune(Checkpoint.load(args.ckpt), _manifest(args.manifest), cfg, args.out, _feat_net(args, cfg))
    return {
        "checkpoint": str(Path(args.out) / "final"),
        "start_loss": ckpt.history[0]["total"],
        "final_loss": ckpt.history[-1]["total"],
    }


def cmd_train_head(args) -> dict:
    from .train import Checkpoint, save_head, train_regression_head

    ckpt = Checkpoint.load(args.ckpt)
    cfg = _train_config(args, "head")
    labeled = _manifest(args.manifest)
    if args.split:
        labeled = labeled.subset(args.split)
    head, net = train_regression_head(ckpt, labeled, frozen=not args.unfrozen, cfg=cfg)
    out = Path(args.out)
    save_head(head, out / "head")
    if args.unfrozen:
        replace(ckpt, net=net, phase="head").save(out / "backbone")
    return {"head": str(out / "head"), "frozen": not args.unfrozen, "labels": len(labeled.labeled())}


def cmd_score(args) -> dict:
    from .score import EmbeddingParams, score_manifest
    from .train import Checkpoint, load_head

    prof = get_profile(args.profile)
    ckpt = Checkpoint.load(args.ckpt)
    m = _manifest(args.manifest)
    if args.split:
        m = m.subset(args.split)
    params = EmbeddingParams(
        args.n_neighbors if args.n_neighbors is not None else prof.n_neighbors,
        args.min_dist if args.min_dist is not None else prof.min_dist,
        args.seed if args.seed is not None else 0,
        args.normalize,
    )
    head = None
    if args.mode == "supervised":
        if not args.head:
            raise UsageError("--mode supervised needs --head DIR")
        head = load_head(args.head)
    table = score_manifest(ckpt, m, args.mode, params, head, group_by_kind=args.group_by == "kind", cache_dir=_cache_dir())
    path = Path(args.out) / "scores.csv"
    table.write(path)
    return {"scores": str(path), "n": len(table.rows), "mode": args.mode}


def cmd_evaluate(args) -> dict:
    from .evaluation import evaluate_scores
    from .score import ScoreTable, logistic_map

    table = ScoreTable.read(args.scores)
    rows = table.rows
    if not rows or any(r["mos"] is None for r in rows):
        raise InputError("correlation metrics need MOS: column 'mos' is missing or empty in " + str(args.scores))
    use_mhat = args.use == "m_hat"
    if use_mhat and any(r["m_hat"] is None for r in rows):
        raise InputError("column 'm_hat' is empty; score in supervised mode or evaluate y")
    scores = np.array([r["m_hat"] if use_mhat else r["y"] for r in rows])
    mos = np.array([r["mos"] for r in rows])
    mapped = scores if use_mhat else logistic_map(scores, mos)
    rep = evaluate_scores(scores, mos, [r["kind"] for r in rows], [r["level"] for r in rows], [r["ref_path"] for r in rows], mapped)
    rep.extra["score_column"] = args.use
    rep.write(args.out)
    return {"report": str(Path(args.out) / "report.json"), "srcc": rep.srcc, "plcc": rep.plcc, "mean_pairwise_acc": rep.mean_pairwise_acc}


def cmd_transfer(args) -> dict:
    from .evaluation import counterfactual_suite, transfer_trials
    from .train import Checkpoint

    ckpt = Checkpoint.load(args.ckpt)
    m = _manifest(args.manifest)
    trials = transfer_trials(m, args.split)
    res = counterfactual_suite(ckpt.net, m, trials, use_modulated=args.use_modulated)
    noise = transfer_trials(m, args.split, source_kinds=("gaussian_noise",), pristine_sources=False)
    if noise:
        res["noise_source"] = counterfactual_suite(ckpt.net, m, noise, use_modulated=args.use_modulated)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "transfer.json").write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
    return {"transfer": str(out / "transfer.json"), "counterfactual_acc": res["acc"], "n": res["n"]}


def cmd_report(args) -> dict:
    from .evaluation import EvalReport

    rep_path = Path(args.eval) / "report.json"
    if not rep_path.exists():
        raise InputError(f"no report.json in {args.eval}")
    rep = EvalReport.from_json(rep_path.read_text())
    if args.transfer:
        t = json.loads((Path(args.transfer) / "transfer.json").read_text())
        rep.counterfactual_acc = t["acc"]
        rep.extra["counterfactual"] = t
    rep.write(args.out)
    return {"report": str(Path(args.out) / "report.json"), "srcc": rep.srcc, "counterfactual_acc": rep.counterfactual_acc}


def cmd_run(args) -> dict:
    """Pretrain -> finetune -> zero-shot score -> evaluate, with the strategy switches."""
    from .evaluation import evaluate_scores
    from .score import EmbeddingParams, score_manifest
    from .train import finetune, init_checkpoint, pretrain

    prof = get_profile(args.profile)
    m = _manifest(args.manifest)
    out = Path(args.out)
    pre_cfg = _train_config(args, "pretrain")
    if args.skip_pretrain:
        ckpt = init_checkpoint(pre_cfg, prof.net)
    else:
        ckpt = pretrain(m, pre_cfg, prof.net, out / "pretrain", _feat_net(args, pre_cfg))
    if not args.skip_finetune:
        ft_cfg = _train_config(args, "finetune")
        ckpt = finetune(ckpt, m, ft_cfg, out / "finetune", _feat_net(args, ft_cfg))
    test = m.subset("test")
    params = EmbeddingParams(prof.n_neighbors, prof.min_dist, args.seed or 0)
    table = score_manifest(ckpt, test, "zeroshot", params, group_by_kind=True, cache_dir=_cache_dir())
    table.write(out / "scores.csv")
    summary = {"scores": str(out / "scores.csv"), "n": len(table.rows)}
    if all(r["mos"] is not None for r in table.rows):
        from .score import logistic_map

        y = np.array([r["y"] for r in table.rows])
        mos = np.array([r["mos"] for r in table.rows])
        rep = evaluate_scores(
            y, mos, [r["kind"] for r in table.rows], [r["level"] for r in table.rows], [r["ref_path"] for r in table.rows], logistic_map(y, mos)
        )
        rep.write(out)
        summary.update(srcc=rep.srcc, plcc=rep.plcc)
    return summary


def cmd_config_diff(args) -> dict:
    diff = profile_diff(args.a, args.b)
    for k, (va, vb) in diff.items():
        print(f"{k}\t{va}\t{vb}")
    return {"fields": len(diff), "a": args.a, "b": args.b}


# --- parser ----------------------------------------------------------------------------------------


def _train_flags(p, phase: str):
    p.add_argument("--profile", default="desk", choices=("desk", "paper"))
    p.add_argument("--config", help="INI file with [train] and [loss_weights] sections")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--precision", choices=("float32", "float64"))
    if phase != "head":
        p.add_argument("--loss", help="comma-separated subset of mse,vgg,gan")
        p.add_argument("--no-causal-layer", action="store_true")
        p.add_argument("--saturating", action="store_true", help="literal log(1 - D(G)) generator term")
        p.add_argument("--save-every", dest="save_every", type=int, help="keep a checkpoint every N epochs")
        p.add_argument("--vgg-weights", dest="vgg_weights", help="VGG19 state dict for the perceptual loss")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="cadis", description=__doc__.splitlines()[0])
    ap.add_argument("--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-dataset", help="synthesize degraded pairs and a split manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--pristine", help="directory of pristine images")
    p.add_argument("--protocol", help="protocol INI file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", default="0.6,0.2,0.2")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--pseudo-mos", dest="pseudo_mos", action="store_true", help="label pairs with 100*SSIM")
    p.add_argument("--desk", action="store_true", help="build the bundled desk benchmark instead")
    p.add_argument("--n-pristine", dest="n_pristine", type=int, default=28)
    p.add_argument("--no-mos", dest="no_mos", action="store_true")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("pretrain")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _train_flags(p, "pretrain")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _train_flags(p, "finetune")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("train-head")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", help="restrict to one split")
    p.add_argument("--unfrozen", action="store_true", help="update the feature path too")
    _train_flags(p, "head")
    p.set_defaults(func=cmd_train_head)

    p = sub.add_parser("score")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("zeroshot", "supervised"), default="zeroshot")
    p.add_argument("--head", help="regression head directory (supervised mode)")
    p.add_argument("--split", default="test")
    p.add_argument("--group-by", dest="group_by", choices=("kind", "none"), default="kind")
    p.add_argument("--n-neighbors", dest="n_neighbors", type=int)
    p.add_argument("--min-dist", dest="min_dist", type=float)
    p.add_argument("--normalize", action="store_true", help="L2-normalise features before embedding")
    p.add_argument("--profile", default="desk", choices=("desk", "paper"))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--use", choices=("y", "m_hat"), default="y")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("transfer")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--use-modulated", dest="use_modulated", action="store_true")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("report")
    p.add_argument("--eval", required=True, help="directory holding report.json from evaluate")
    p.add_argument("--transfer", help="directory holding transfer.json")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="pretrain, finetune, score and evaluate in one go")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--skip-pretrain", dest="skip_pretrain", action="store_true")
    p.add_argument("--skip-finetune", dest="skip_finetune", action="store_true")
    _train_flags(p, "pretrain")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("config-diff", help="fields that differ between two profiles")
    p.add_argument("--a", default="desk")
    p.add_argument("--b", default="paper")
    p.set_defaults(func=cmd_config_diff)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = args.func(args)
    except ValueError as exc:  # validation, configuration and input errors
        _emit({"command": args.command, "status": "error", "error": str(exc)})
        print(f"cadis {args.command}: {exc}", file=sys.stderr)
        return 1
    except (CadisError, RuntimeError, OSError) as exc:
        _emit({"command": args.command, "status": "failed", "error": str(exc)})
        print(f"cadis {args.command}: {exc}", file=sys.stderr)
        return 2
    _emit({"command": args.command, "status": "ok", **summary})
    return 0


if __name__ == "__main__":
    sys.exit(main())
