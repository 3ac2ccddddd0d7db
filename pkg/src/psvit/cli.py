"""Command-line harness: ``psvit <command> [flags]``.

Exit codes: 0 success, 1 domain error (invalid genotype, infeasible budget,
mismatched checkpoint or dataset, ...), 2 usage error. Results go to stdout or
``--out``; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import checkpoint as ckpt
from . import io
from .arch import (
    Genotype,
    GenotypeError,
    count_flops,
    count_params,
    preset,
    require_valid,
    validate,
)
from .data import DatasetError, SyntheticSpec, generate, load_dataset, save_dataset
from .layers import UndefinedCorrelation, attention_correlation, load_attention_maps, save_attention_maps
from .nas import (
    InfeasibleBudget,
    PathSpace,
    SearchConfig,
    Supernet,
    TrainConfig,
    Trainer,
    TrainingAborted,
    accuracy,
    evaluate_subnet,
    evolutionary_search,
    parse_path,
    path_str,
    supernet_template,
)
from .tensor import ContractError, ShapeError, Tensor, no_grad


class DomainError(Exception):
    """Reported as ``error CODE: message`` with exit status 1."""

    def __init__(self, code, message):
        self.code = code
        super().__init__(message)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def load_genotype(ref) -> Genotype:
    """A preset name or a path to a genotype JSON file."""
    if ref is None:
        raise DomainError("NO_GENOTYPE", "pass --genotype (preset name or JSON file)")
    if os.path.exists(ref):
        try:
            with open(ref) as f:
                return Genotype.from_dict(json.load(f))
        except (KeyError, TypeError, ValueError) as exc:
            raise DomainError("BAD_GENOTYPE", f"{ref}: {exc}") from exc
    try:
        return preset(ref)
    except KeyError as exc:
        raise DomainError("UNKNOWN_GENOTYPE", f"{ref!r} is neither a file nor a preset") from exc


def emit(obj, out=None):
    text = json.dumps(obj, indent=2, sort_keys=True) if not isinstance(obj, str) else obj
    if out:
        with open(out, "w") as f:
            f.write(text + "\n")
    else:
        print(text)


def _dataset(args):
    if args.data:
        return load_dataset(args.data)
    return generate(SyntheticSpec(seed=args.data_seed))


def _check_data(ds, g: Genotype):
    p = g.patch
    want = (p.image_size, p.image_size, p.channels)
    if tuple(ds.image_shape) != want:
        raise DomainError("DATASET_MISMATCH", f"dataset images are {tuple(ds.image_shape)}, model expects {want}")
    if ds.labels.size and int(ds.labels.max()) >= g.num_classes:
        raise DomainError("DATASET_MISMATCH", f"labels reach {int(ds.labels.max())}, model has {g.num_classes} classes")


def _run_config(args):
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}


def _prepare_out(args):
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        emit(_run_config(args), os.path.join(args.out, "run.json"))


class _JsonLog:
    def __init__(self, path, append=False):
        self.f = open(path or os.devnull, "a" if append else "w", encoding="utf-8")

    def __call__(self, rec):
        self.f.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self):
        self.f.close()


def _cells(counts):
    return counts[0] if len(counts) == 1 else counts


def _train_config(args):
    return TrainConfig(
        iterations=args.iterations,
        batch_size=args.batch_size,
        lr=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        label_smoothing=args.label_smoothing,
        warmup=args.warmup,
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_describe(args):
    g = load_genotype(args.genotype)
    if args.json:
        emit(g.to_dict(), args.out)
        return 0
    rep = count_flops(g)
    lines = [
        f"pooling {g.pooling_mode}  image {g.patch.image_size}  patch {g.patch.patch_size}  "
        f"cls {'yes' if g.patch.cls_token else 'no'}  classes {g.num_classes}  mlp_ratio {g.mlp_ratio}",
        f"{'stage':>5} {'tokens':>7} {'dim':>5} {'heads':>5} {'depth':>5}  layers",
    ]
    for i, s in enumerate(g.stages):
        layers = "".join("s" if f else "b" for f in s.layer_flags()) or "-"
        lines.append(f"{i:>5} {s.tokens:>7} {s.dim:>5} {s.heads:>5} {s.depth:>5}  {layers}")
    lines.append(f"depth {g.depth}  MACs {rep.total_macs / 1e9:.3f} G  params {count_params(g)['total'] / 1e6:.2f} M")
    problems = validate(g)
    for v in problems:
        lines.append(f"violation {v.code}: {v.message}")
    emit("\n".join(lines), args.out)
    return 1 if problems else 0


def cmd_flops(args):
    g = load_genotype(args.genotype)
    require_valid(g)
    rep = count_flops(g, score_macs=args.score_macs, bias=not args.no_bias)
    if args.table:
        emit(rep.render(), args.out)
    else:
        d = rep.to_dict()
        d["params_breakdown"] = count_params(g, bias=not args.no_bias)
        emit(d, args.out)
    return 0


def cmd_validate(args):
    g = load_genotype(args.genotype)
    problems = validate(g)
    emit({"valid": not problems, "violations": [v.__dict__ for v in problems]}, args.out)
    for v in problems:
        where = f" (stage {v.stage})" if v.stage is not None else ""
        print(f"{v.code}{where}: {v.message}", file=sys.stderr)
    return 1 if problems else 0


def cmd_gen_data(args):
    spec = SyntheticSpec(
        seed=args.seed,
        num_classes=args.num_classes,
        num_samples=args.num_samples,
        image_size=args.image_size,
        channels=args.channels,
        noise=args.noise,
        val_percent=args.val_percent,
    )
    manifest = save_dataset(args.out, generate(spec))
    summary = {k: manifest[k] for k in ("num_samples", "num_train", "num_val", "class_counts", "image_shape")}
    print(json.dumps(summary, sort_keys=True))
    return 0


def _fit(args, trainer, ds, log, label):
    """Shared loop of ``train`` and ``supernet-train``: logging, checkpoints, early stop."""
    (xt, yt), (xv, yv) = ds.train, ds.val
    run_cfg = _run_config(args)
    ck_path = os.path.join(args.out, "checkpoint.psvl") if args.out else None
    evaluate = _make_eval(trainer.model, args)

    def callback(tr, rec):
        log(rec)
        if ck_path and args.checkpoint_every and tr.iteration % args.checkpoint_every == 0:
            ckpt.save(os.path.join(args.out, f"checkpoint_{tr.iteration:06d}.psvl"), tr, run_cfg)
        if args.eval_every and tr.iteration % args.eval_every == 0:
            acc = evaluate(xt, yt)
            log({"iteration": tr.iteration, "train_acc": acc})
            print(f"[{label}] iter {tr.iteration}  loss {rec['loss']:.4f}  train_acc {acc:.3f}", file=sys.stderr)
            if args.target_acc is not None and acc >= args.target_acc:
                return False
        return True

    try:
        trainer.run(xt, yt, until=args.iterations, callback=callback)
    except TrainingAborted as exc:
        log({"aborted": True, **exc.record})
        if args.out:
            emit(exc.record, os.path.join(args.out, "abort.json"))
        raise DomainError("NAN_LOSS", str(exc)) from exc
    if ck_path:
        ckpt.save(ck_path, trainer, run_cfg)
    return evaluate, (xt, yt), (xv, yv)


def _make_eval(model, args):
    if isinstance(model, Supernet):
        path = parse_path(args.eval_path or "B" * model.num_cells, model.num_cells)
        return lambda x, y: evaluate_subnet(model, path, x, y)
    return lambda x, y: accuracy(model, x, y)


def _trainer(args, g, kind):
    if args.resume:
        trainer, meta = ckpt.load_trainer(args.resume)
        if meta["kind"] != kind:
            raise DomainError("CHECKPOINT_MISMATCH", f"{args.resume} holds a {meta['kind']}, not a {kind}")
        if g is not None and trainer.model.genotype != g:
            raise DomainError("CHECKPOINT_MISMATCH", "resume checkpoint genotype differs from --genotype")
        if args.iterations is None:
            args.iterations = trainer.cfg.iterations
        trainer.cfg.iterations = args.iterations
        return trainer
    if args.iterations is None:
        args.iterations = args.default_iterations
    rng = np.random.default_rng(args.seed)
    model = Supernet(g, rng) if kind == "supernet" else ckpt.build_model(g, "vit", rng)
    return Trainer(model, _train_config(args), np.random.default_rng([args.seed, 1]), args.fixed_path)


def cmd_train(args):
    t0 = time.perf_counter()
    g = load_genotype(args.genotype) if args.genotype or not args.resume else None
    if g is not None:
        require_valid(g)
    trainer = _trainer(args, g, "vit")
    g = trainer.model.genotype
    ds = _dataset(args)
    _check_data(ds, g)
    _prepare_out(args)
    log = _JsonLog(os.path.join(args.out, "log.jsonl") if args.out else None, append=bool(args.resume))
    try:
        evaluate, train, val = _fit(args, trainer, ds, log, "train")
    finally:
        log.close()
    metrics = {
        "train_acc": evaluate(*train),
        "val_acc": evaluate(*val),
        "flops": count_flops(g).total_macs,
        "params": count_params(g)["total"],
        "iterations": trainer.iteration,
        "wall_seconds": time.perf_counter() - t0,
    }
    emit(metrics, os.path.join(args.out, "metrics.json") if args.out else None)
    if args.out:
        print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_supernet_train(args):
    t0 = time.perf_counter()
    template = None
    if args.genotype or not args.resume:
        template = supernet_template(load_genotype(args.genotype), _cells(args.cells_per_stage))
        require_valid(template)
    args.fixed_path = None
    trainer = _trainer(args, template, "supernet")
    sn = trainer.model
    ds = _dataset(args)
    _check_data(ds, sn.genotype)
    _prepare_out(args)
    log = _JsonLog(os.path.join(args.out, "log.jsonl") if args.out else None, append=bool(args.resume))
    try:
        evaluate, train, val = _fit(args, trainer, ds, log, "supernet")
    finally:
        log.close()
    metrics = {
        "train_acc": evaluate(*train),
        "val_acc": evaluate(*val),
        "eval_path": path_str(parse_path(args.eval_path or "B" * sn.num_cells)),
        "flops": count_flops(sn.genotype).total_macs,
        "params": sn.num_parameters(),
        "iterations": trainer.iteration,
        "wall_seconds": time.perf_counter() - t0,
    }
    emit(metrics, os.path.join(args.out, "metrics.json") if args.out else None)
    if args.out:
        print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_search(args):
    t0 = time.perf_counter()
    if args.fitness == "accuracy":
        if not args.checkpoint:
            raise DomainError("NO_CHECKPOINT", "accuracy fitness needs --checkpoint of a trained supernet")
        supernet, meta = ckpt.load_model(args.checkpoint)
        if meta["kind"] != "supernet":
            raise DomainError("CHECKPOINT_MISMATCH", f"{args.checkpoint} holds a {meta['kind']}, not a supernet")
        template = supernet.genotype
        ds = _dataset(args)
        _check_data(ds, template)
        xv, yv = ds.val if args.split == "val" else ds.train

        def fitness(path):
            return evaluate_subnet(supernet, path, xv, yv)

    else:
        if args.checkpoint:
            template = ckpt.read(args.checkpoint)[0]
        else:
            template = supernet_template(load_genotype(args.genotype), _cells(args.cells_per_stage))
        require_valid(template)
        space_for_target = PathSpace(template)
        target = args.target if args.target is not None else args.budget

        def fitness(path):
            return -abs(space_for_target.flops(path) - target)

    space = PathSpace(template, not args.allow_shared_last)
    cfg = SearchConfig(
        flops_budget=int(args.budget),
        population_size=args.population,
        max_iterations=args.iterations,
        total_samples=args.samples,
        topk=args.topk,
        mutation_prob=args.mutation_prob,
        crossover_rate=args.crossover_rate,
        seed=args.seed,
        last_layer_independent=not args.allow_shared_last,
        workers=args.workers,
    )
    _prepare_out(args)
    log = _JsonLog(os.path.join(args.out, "log.jsonl") if args.out else None)
    try:
        result = evolutionary_search(space, cfg, fitness, log)
    except InfeasibleBudget as exc:
        raise DomainError("INFEASIBLE_BUDGET", str(exc)) from exc
    finally:
        log.close()
    ranked = []
    for rank, c in enumerate(result.topk, 1):
        g = template.with_cells(c.path)
        ranked.append({"rank": rank, **c.to_dict(), "genotype": g.to_dict()})
    summary = {
        "best": ranked[0]["path"],
        "best_fitness": ranked[0]["fitness"],
        "flops": ranked[0]["flops"],
        "params": count_params(template.with_cells(result.best.path))["total"],
        "evaluated": len(result.state.archive),
        "iterations": result.state.iteration,
        "wall_seconds": time.perf_counter() - t0,
    }
    if args.out:
        emit(ranked, os.path.join(args.out, "ranked.json"))
        emit(summary, os.path.join(args.out, "metrics.json"))
        with open(os.path.join(args.out, "best_genotype.json"), "w") as f:
            f.write(json.dumps(ranked[0]["genotype"], indent=2, sort_keys=True) + "\n")
    emit({"summary": summary, "ranked": [{k: r[k] for k in ("rank", "path", "fitness", "flops")} for r in ranked]})
    return 0


def cmd_eval(args):
    model, meta = ckpt.load_model(args.checkpoint)
    ds = _dataset(args)
    _check_data(ds, model.genotype)
    (xt, yt), (xv, yv) = ds.train, ds.val
    if meta["kind"] == "supernet":
        path = parse_path(args.path or "B" * model.num_cells, model.num_cells)
        g = model.genotype_for(path)

        def run(x, y):
            return evaluate_subnet(model, path, x, y)

    else:
        g = model.genotype

        def run(x, y):
            return accuracy(model, x, y)

    t0 = time.perf_counter()
    metrics = {
        "train_acc": run(xt, yt),
        "val_acc": run(xv, yv),
        "flops": count_flops(g).total_macs,
        "params": count_params(g)["total"],
    }
    metrics["wall_seconds"] = time.perf_counter() - t0
    emit(metrics, args.out)
    return 0


def correlation_table(stage_maps):
    """Rows for adjacent realised layers; pairs across a pooling boundary are N/A."""
    flat = [(si, li, m) for si, maps in enumerate(stage_maps) for li, m in enumerate(maps)]
    if len(flat) < 2:
        raise DomainError("TOO_FEW_LAYERS", f"model realises {len(flat)} attention layer(s); need at least 2")
    rows = []
    for (sa, la, ma), (sb, lb, mb) in zip(flat[:-1], flat[1:]):
        row = {"stage_a": sa, "layer_a": la, "stage_b": sb, "layer_b": lb}
        if sa != sb:
            row.update(correlation=None, note="N/A (across pooling)")
        else:
            try:
                row["correlation"] = float(np.mean(attention_correlation(ma, mb)))
                row["shared"] = ma is mb
            except UndefinedCorrelation as exc:
                row.update(correlation=None, note=f"undefined ({exc})")
        rows.append(row)
    return rows


def _render_correlations(rows):
    lines = [f"{'pair':<18} {'correlation':>12}"]
    for r in rows:
        pair = f"s{r['stage_a']}.l{r['layer_a']} -> s{r['stage_b']}.l{r['layer_b']}"
        val = f"{r['correlation']:.6f}" if r["correlation"] is not None else r.get("note", "N/A")
        lines.append(f"{pair:<18} {val:>12}")
    return "\n".join(lines)


def cmd_correlate(args):
    if args.maps:
        a, b = (load_attention_maps(p) for p in args.maps)
        r = attention_correlation(a, b)
        emit({"per_head": [float(x) for x in r], "mean": float(np.mean(r))}, args.out)
        return 0
    if not args.checkpoint:
        raise DomainError("NO_CHECKPOINT", "pass --checkpoint (or --maps A B)")
    model, meta = ckpt.load_model(args.checkpoint)
    g = model.genotype
    if args.data:
        ds = load_dataset(args.data)
        _check_data(ds, g)
        images = ds.images[: args.batch]
    else:
        p = g.patch
        images = np.random.default_rng(args.seed).normal(size=(args.batch, p.image_size, p.image_size, p.channels))
    stage_maps = []
    with no_grad():
        if meta["kind"] == "supernet":
            model(Tensor(images), parse_path(args.path or "B" * model.num_cells, model.num_cells), stage_maps)
        else:
            model(Tensor(images), stage_maps)
    rows = correlation_table(stage_maps)
    if args.dump_maps:
        os.makedirs(args.dump_maps, exist_ok=True)
        for si, maps in enumerate(stage_maps):
            for li, m in enumerate(maps):
                save_attention_maps(os.path.join(args.dump_maps, f"s{si}_l{li}.psam"), m.data.mean(axis=0))
    if args.json:
        emit(rows, args.out)
    else:
        emit(_render_correlations(rows), args.out)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_data(p):
    p.add_argument("--data", help="dataset directory from gen-data (default: synthetic set generated in memory)")
    p.add_argument("--data-seed", type=int, default=7, help="seed of the in-memory synthetic set")


def _add_training(p, iterations):
    p.add_argument(
        "--iterations", type=int, help=f"schedule length (default {iterations}; on --resume, the checkpoint's)"
    )
    p.set_defaults(default_iterations=iterations)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--label-smoothing", type=float, default=0.1)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-every", type=int, default=250, help="0 disables periodic evaluation")
    p.add_argument("--target-acc", type=float, help="stop once periodic train accuracy reaches this")
    p.add_argument("--checkpoint-every", type=int, default=500, help="0 disables periodic checkpoints")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--out", help="run directory (run.json, log.jsonl, checkpoint_*.psvl, checkpoint.psvl, metrics.json)")
    _add_data(p)


def build_parser():
    ap = argparse.ArgumentParser(prog="psvit", description="Pooled/shared-attention ViT search toolkit")
    ap.add_argument("--config", help="JSON file whose keys set defaults for the chosen command's flags")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("describe", help="print a genotype's stage schedule")
    p.add_argument("--genotype", "--preset", dest="genotype")
    p.add_argument("--json", action="store_true", help="print the genotype JSON instead")
    p.add_argument("--out")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("flops", help="MAC and parameter report")
    p.add_argument("--genotype", "--preset", dest="genotype")
    p.add_argument("--score-macs", type=int, default=1, choices=(1, 2), help="MACs per N*N*d attention product")
    p.add_argument("--no-bias", action="store_true")
    p.add_argument("--table", action="store_true", help="aligned text table instead of JSON")
    p.add_argument("--out")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("validate", help="check genotype rules")
    p.add_argument("--genotype", "--preset", dest="genotype")
    p.add_argument("--out")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("gen-data", help="write the synthetic dataset to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--num-samples", type=int, default=500)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--val-percent", type=int, default=20)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one genotype")
    p.add_argument("--genotype", "--preset", dest="genotype")
    _add_training(p, 3000)
    p.set_defaults(func=cmd_train, fixed_path=None, eval_path=None)

    p = sub.add_parser("supernet-train", help="single-path supernet training")
    p.add_argument("--genotype", "--preset", dest="genotype", help="schedule template")
    p.add_argument("--cells-per-stage", type=int, nargs="+", default=[6])
    p.add_argument("--eval-path", help="path used for periodic accuracy (default: all basic)")
    _add_training(p, 2000)
    p.set_defaults(func=cmd_supernet_train)

    p = sub.add_parser("search", help="FLOPS-constrained evolutionary search")
    p.add_argument("--checkpoint", help="trained supernet checkpoint")
    p.add_argument("--genotype", "--preset", dest="genotype", help="template for surrogate fitness without a checkpoint")
    p.add_argument("--cells-per-stage", type=int, nargs="+", default=[6])
    p.add_argument("--budget", type=float, required=True, help="MAC budget")
    p.add_argument("--fitness", choices=("accuracy", "surrogate"), default="accuracy")
    p.add_argument("--target", type=float, help="surrogate target MACs (default: the budget)")
    p.add_argument("--split", choices=("val", "train"), default="val")
    p.add_argument("--population", type=int, default=50)
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("--mutation-prob", type=float, default=0.1)
    p.add_argument("--crossover-rate", type=float, default=0.5)
    p.add_argument("--allow-shared-last", action="store_true", help="skip the last-layer-independent repair")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    _add_data(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--path", help="subnet path for supernet checkpoints")
    p.add_argument("--out")
    _add_data(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("correlate", help="adjacent-layer attention-map correlation")
    p.add_argument("--checkpoint")
    p.add_argument("--maps", nargs=2, metavar=("A", "B"), help="compare two dumped map files instead")
    p.add_argument("--path", help="subnet path for supernet checkpoints")
    p.add_argument("--data", help="dataset directory (default: a random input batch)")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-maps", help="directory for batch-mean maps of every layer")
    p.add_argument("--json", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_correlate)
    return ap


def parse_args(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.config:
        try:
            with open(args.config) as f:
                cfg = json.load(f)
        except (OSError, ValueError) as exc:
            ap.error(f"cannot read --config {args.config}: {exc}")
        cfg.pop("command", None)
        sub = ap._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions} | set(sub._defaults)
        unknown = sorted(set(cfg) - known)
        if unknown:
            ap.error(f"--config keys not accepted by {args.command}: {', '.join(unknown)}")
        sub.set_defaults(**cfg)
        args = ap.parse_args(argv)
    return args


_DOMAIN = (ContractError, GenotypeError, DatasetError, io.FormatError, ckpt.CheckpointError, UndefinedCorrelation, ShapeError)


def main(argv=None):
    args = parse_args(argv)
    try:
        return args.func(args)
    except DomainError as exc:
        print(f"error {exc.code}: {exc}", file=sys.stderr)
    except GenotypeError as exc:
        for v in exc.violations:
            print(f"error {v.code}: {v.message}", file=sys.stderr)
    except _DOMAIN as exc:
        print(f"error {getattr(exc, 'code', type(exc).__name__)}: {exc}", file=sys.stderr)
    except (OSError, ValueError) as exc:
        print(f"error {type(exc).__name__}: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
