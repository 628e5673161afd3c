"""Command-line front end: ``moce <subcommand> [--config PATH] [--seed N] [--out DIR] ...``.

Exit status is 0 on success, 2 on a usage error and 1 on a runtime failure.
Every successful run writes ``manifest.json`` into ``--out`` next to its
artifacts.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
import time

import numpy as np

from . import reports
from .clustering import assign, cluster, extract_features, fit_feature_transform, raw_features
from .deployment import ExpertSelection, extract_submodel, finetune_probe, reconstruction_psnr, \
    select_expert, split_indices
from .io import Dataset, atomic_write, load_checkpoint, read_dataset, save_checkpoint, \
    write_dataset
from .model import ModelConfig
from .synthetic import SyntheticCorpusConfig, domain_separability, gen_synthetic
from .training import TrainConfig, cluster_model_from_checkpoint, cluster_to_checkpoint, \
    mutual_information, network_from_checkpoint, network_to_checkpoint, pretrain_dense, \
    pretrain_moce, routing_table

log = logging.getLogger("moce")

COMMANDS = ("gen-data", "pretrain-dense", "cluster", "pretrain-moce", "routing-table",
            "select-expert", "extract-submodel", "finetune", "eval-psnr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        flags = sorted({s for a in self._actions for s in a.option_strings})
        raise UsageError(f"{self.prog}: {message}\nvalid flags: {' '.join(flags)}")


# ---------------------------------------------------------------- helpers

def git_describe() -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError(f"config {path} must hold a JSON object")
    return cfg


def _write_json(path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _train_config(cfg: dict, args) -> TrainConfig:
    kw = dict(cfg.get("train", {}))
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("base_lr", "base_lr"),
                      ("lr_multiplier", "lr_multiplier"),
                      ("expert_init_noise", "expert_init_noise")):
        v = getattr(args, flag, None)
        if v is not None:
            kw[key] = v
    kw["seed"] = args.seed
    if getattr(args, "init", None):
        kw["init_checkpoint"] = args.init
    return TrainConfig(**kw)


def _model_config(cfg: dict, **overrides) -> ModelConfig:
    kw = dict(cfg.get("model", {}))
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return ModelConfig(**kw)


def _dataset(path, domain=None) -> Dataset:
    ds = read_dataset(path)
    if domain is not None:
        ds = ds.where_domain(domain)
        if len(ds) == 0:
            raise ValueError(f"dataset {path} has no images of domain {domain}")
    return ds


def _cluster_ids(cm, dense_path, images):
    if dense_path is None:
        if len(cm.assignments) != len(images):
            raise ValueError("stored cluster assignments do not match the dataset; "
                             "pass --dense to assign images to clusters")
        return cm.assignments
    dense = network_from_checkpoint(load_checkpoint(dense_path))
    return assign(cm.centroids, extract_features(dense, images, cm.transform))


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args, cfg, out):
    data_cfg = dict(cfg.get("data", {}))
    if args.images_per_class is not None:
        data_cfg["images_per_class"] = args.images_per_class
    if args.image_size is not None:
        data_cfg["image_size"] = args.image_size
    if args.classes_per_domain is not None:
        data_cfg["domains"] = [{"family": f, "num_classes": args.classes_per_domain}
                               for f in ("blobs", "gratings")]
    data_cfg["seed"] = args.seed
    sc = SyntheticCorpusConfig.from_dict(data_cfg)
    ds = gen_synthetic(sc)
    path = os.path.join(out, "dataset.mocd")
    write_dataset(path, ds)
    check = {"domain_separability": domain_separability(ds, args.seed), "count": len(ds),
             "config": sc.to_dict()}
    _write_json(os.path.join(out, "generator_check.json"), check)
    return {"outputs": ["dataset.mocd", "generator_check.json"], "config": sc.to_dict()}


def cmd_pretrain_dense(args, cfg, out):
    ds = _dataset(args.data, args.domain)
    tc = _train_config(cfg, args)
    init = load_checkpoint(args.init) if args.init else None
    res = pretrain_dense(tc, _model_config(cfg, moe_layers=[]), ds.float_images(), init=init)
    save_checkpoint(os.path.join(out, "dense.ckpt"), res.checkpoint())
    reports.loss_curve_csv(res.history, os.path.join(out, "loss_curve.csv"))
    return {"inputs": {"data": args.data, "init": args.init},
            "outputs": ["dense.ckpt", "loss_curve.csv"], "config": {"train": tc.to_dict()}}


def cmd_cluster(args, cfg, out):
    ccfg = dict(cfg.get("cluster", {}))
    m = args.clusters or ccfg.get("num_clusters", 32)
    epochs = args.epochs if args.epochs is not None else ccfg.get("epochs", 10)
    eps = args.entropy_weight or ccfg.get("entropy_weight", 0.05)
    iters = args.sinkhorn_iters or ccfg.get("sinkhorn_iters", 3)
    whiten = not args.no_whiten and ccfg.get("whiten", True)
    dense = network_from_checkpoint(load_checkpoint(args.checkpoint))
    X = _dataset(args.data).float_images()
    transform = fit_feature_transform(raw_features(dense, X), whiten=whiten)
    cm = cluster(extract_features(dense, X, transform), m, epochs=epochs, seed=args.seed,
                 entropy_weight=eps, sinkhorn_iters=iters, transform=transform)
    save_checkpoint(os.path.join(out, "clusters.ckpt"), cluster_to_checkpoint(cm))
    _write_json(os.path.join(out, "clusters.json"),
                {"sizes": cm.sizes().tolist(), "objective": cm.objective})
    resolved = {"num_clusters": m, "epochs": epochs, "entropy_weight": eps,
                "sinkhorn_iters": iters, "whiten": whiten}
    return {"inputs": {"data": args.data, "checkpoint": args.checkpoint},
            "outputs": ["clusters.ckpt", "clusters.json"], "config": {"cluster": resolved}}


def cmd_pretrain_moce(args, cfg, out):
    X = _dataset(args.data).float_images()
    tc = _train_config(cfg, args)
    mc = _model_config(cfg, gate=args.gate, num_experts=args.experts, top_k=args.top_k)
    if mc.is_dense:
        raise ValueError("model config has no MoE layers")
    cm = None
    if args.clusters:
        cm = cluster_model_from_checkpoint(load_checkpoint(args.clusters))
    init = load_checkpoint(args.init) if args.init else None
    res = pretrain_moce(tc, mc, X, cm if mc.gate == "cluster" else None, init=init)
    save_checkpoint(os.path.join(out, "moce.ckpt"),
                    res.checkpoint(cm if mc.gate == "cluster" else None))
    reports.loss_curve_csv(res.history, os.path.join(out, "loss_curve.csv"))
    return {"inputs": {"data": args.data, "init": args.init, "clusters": args.clusters},
            "outputs": ["moce.ckpt", "loss_curve.csv"],
            "config": {"train": tc.to_dict(), "model": mc.to_dict()}}


def cmd_routing_table(args, cfg, out):
    ds = _dataset(args.data)
    ckpt = load_checkpoint(args.checkpoint)
    net = network_from_checkpoint(ckpt)
    X = ds.float_images()
    cids = None
    if net.config.gate == "cluster":
        cids = _cluster_ids(cluster_model_from_checkpoint(ckpt), args.dense, X)
    tables = routing_table(net, X, ds.labels, cids)
    data = {"gate": net.config.gate, "layers": {}}
    outputs = ["routing.json"]
    for layer, t in tables.items():
        data["layers"][str(layer)] = {
            "class": t.by_class.tolist(),
            "cluster": None if t.by_cluster is None else t.by_cluster.tolist(),
            "mutual_information": mutual_information(t.class_counts)}
    _write_json(os.path.join(out, "routing.json"), data)
    outputs += [os.path.basename(p) for p in reports.routing_csvs(data, out)]
    return {"inputs": {"data": args.data, "checkpoint": args.checkpoint, "dense": args.dense},
            "outputs": outputs}


def cmd_select_expert(args, cfg, out):
    ckpt = load_checkpoint(args.checkpoint)
    moce = network_from_checkpoint(ckpt)
    dense = network_from_checkpoint(load_checkpoint(args.dense))
    cm = cluster_model_from_checkpoint(ckpt)
    sel = select_expert(cm, dense, moce, _dataset(args.data).float_images())
    _write_json(os.path.join(out, "selection.json"), sel.to_dict())
    return {"inputs": {"data": args.data, "checkpoint": args.checkpoint, "dense": args.dense},
            "outputs": ["selection.json"]}


def cmd_extract_submodel(args, cfg, out):
    moce = network_from_checkpoint(load_checkpoint(args.checkpoint))
    with open(args.selection) as fh:
        d = json.load(fh)
    sel = ExpertSelection(int(d["chosen_cluster"]), np.asarray(d["histogram"]),
                          {int(k): int(v) for k, v in d["experts"].items()},
                          {int(k): float(v) for k, v in d["gate_weights"].items()},
                          moce.config.top_k)
    sub = extract_submodel(moce, sel)
    save_checkpoint(os.path.join(out, "submodel.ckpt"), network_to_checkpoint(sub))
    return {"inputs": {"checkpoint": args.checkpoint, "selection": args.selection},
            "outputs": ["submodel.ckpt"]}


def cmd_finetune(args, cfg, out):
    pcfg = dict(cfg.get("probe", {}))
    ds = _dataset(args.data)
    net = network_from_checkpoint(load_checkpoint(args.checkpoint), dtype=np.float32)
    grid = tuple(args.lr_grid or pcfg.get("lr_grid", (1e-2, 3e-2, 1e-1)))
    steps = args.steps if args.steps is not None else pcfg.get("steps", 300)
    batch = args.batch_size or pcfg.get("batch_size", 64)
    k = args.train_per_class or pcfg.get("train_per_class")
    if k:
        tr = np.concatenate([np.nonzero(ds.labels == c)[0][:k] for c in np.unique(ds.labels)])
        split = (tr, np.setdiff1d(np.arange(len(ds)), tr))
    else:
        split = split_indices(len(ds), args.seed)
    res = finetune_probe(net, ds.float_images(), ds.labels, lr_grid=grid, steps=steps,
                         batch_size=batch, seed=args.seed, split=split)
    rows = [{"model": args.name, "task": args.task, "accuracy": res.accuracy}]
    _write_json(os.path.join(out, "accuracy.json"),
                {"rows": rows, "best_lr": res.best_lr,
                 "per_lr": {repr(k_): v for k_, v in res.per_lr.items()}})
    reports.accuracy_csv([(r["model"], r["task"], r["accuracy"]) for r in rows],
                         os.path.join(out, "accuracy.csv"))
    return {"inputs": {"data": args.data, "checkpoint": args.checkpoint},
            "outputs": ["accuracy.json", "accuracy.csv"],
            "config": {"probe": {"lr_grid": list(grid), "steps": steps, "batch_size": batch,
                                 "train_per_class": k}}}


def cmd_eval_psnr(args, cfg, out):
    ds = _dataset(args.data)
    models = {}
    for spec in args.model:
        name, sep, path = spec.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"--model expects NAME=PATH, got {spec!r}")
        models[name] = path
    if args.dense_name not in models:
        raise UsageError(f"--dense-name {args.dense_name!r} is not among the --model names")
    values = {}
    for name, path in models.items():
        ckpt = load_checkpoint(path)
        net = network_from_checkpoint(ckpt)
        for dom in np.unique(ds.domains):
            X = ds.where_domain(int(dom)).float_images()
            cids = None
            if net.config.gate == "cluster" and not net.config.is_dense:
                cids = _cluster_ids(cluster_model_from_checkpoint(ckpt),
                                    args.dense or models[args.dense_name], X)
            values[(name, f"domain{int(dom)}")] = reconstruction_psnr(net, X, args.seed, cids)
    rows = reports.psnr_rows(values, args.dense_name)
    _write_json(os.path.join(out, "psnr.json"),
                {"dense_model": args.dense_name,
                 "rows": [{"model": m, "task": t, "psnr": p, "delta_vs_dense": d}
                          for m, t, p, d in rows]})
    reports.psnr_csv(rows, os.path.join(out, "psnr.csv"))
    return {"inputs": {"data": args.data, **{f"model:{k}": v for k, v in models.items()}},
            "outputs": ["psnr.json", "psnr.csv"]}


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config with data/model/train/cluster/probe keys")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="moce", description="Mixture of cluster-conditional experts, desk scale.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    p.subcommands = sub.choices

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(fn=fn)
        return sp

    def train_flags(sp):
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--base-lr", type=float)
        sp.add_argument("--lr-multiplier", type=float)
        sp.add_argument("--init", help="checkpoint to continue from")

    sp = add("gen-data", cmd_gen_data, "generate the synthetic two-domain corpus")
    sp.add_argument("--images-per-class", type=int)
    sp.add_argument("--image-size", type=int)
    sp.add_argument("--classes-per-domain", type=int)

    sp = add("pretrain-dense", cmd_pretrain_dense, "train a dense masked autoencoder")
    sp.add_argument("--data", required=True)
    sp.add_argument("--domain", type=int, help="train on one domain only")
    train_flags(sp)

    sp = add("cluster", cmd_cluster, "balanced clustering of dense features")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True, help="dense checkpoint")
    sp.add_argument("--clusters", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--entropy-weight", type=float)
    sp.add_argument("--sinkhorn-iters", type=int)
    sp.add_argument("--no-whiten", action="store_true")

    sp = add("pretrain-moce", cmd_pretrain_moce, "train a mixture-of-experts autoencoder")
    sp.add_argument("--data", required=True)
    sp.add_argument("--clusters", help="cluster checkpoint (cluster gate)")
    sp.add_argument("--gate", choices=("cluster", "token"))
    sp.add_argument("--experts", type=int)
    sp.add_argument("--top-k", type=int)
    sp.add_argument("--expert-init-noise", type=float)
    train_flags(sp)

    sp = add("routing-table", cmd_routing_table, "class/cluster x expert routing proportions")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dense", help="dense checkpoint used to assign clusters")

    sp = add("select-expert", cmd_select_expert, "pick the expert path for a downstream set")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True, help="MoCE checkpoint")
    sp.add_argument("--dense", required=True, help="dense checkpoint used for clustering")

    sp = add("extract-submodel", cmd_extract_submodel, "fold the selected experts into a dense net")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--selection", required=True)

    sp = add("finetune", cmd_finetune, "fine-tune a linear-head probe end to end")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--lr-grid", type=lambda s: [float(v) for v in s.split(",")])
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--train-per-class", type=int)
    sp.add_argument("--name", default="model")
    sp.add_argument("--task", default="task")

    sp = add("eval-psnr", cmd_eval_psnr, "masked-reconstruction PSNR per domain")
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", action="append", required=True, help="NAME=PATH, repeatable")
    sp.add_argument("--dense", help="dense checkpoint used to assign clusters")
    sp.add_argument("--dense-name", default="dense")
    return p


def run_cli(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args, extra = parser.parse_known_args(argv)
        if extra:
            sp = parser.subcommands.get(getattr(args, "command", None), parser)
            sp.error(f"unrecognized arguments: {' '.join(extra)}")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed < 0 or args.seed >= 2 ** 64:
        print("moce: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    start = time.perf_counter()
    try:
        cfg = _load_config(args.config)
        os.makedirs(args.out, exist_ok=True)
        info = args.fn(args, cfg, args.out) or {}
    except UsageError as exc:
        print(f"moce {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        log.debug("failure", exc_info=True)
        print(f"moce {args.command}: error: {exc}", file=sys.stderr)
        return 1
    inputs = {k: v for k, v in info.get("inputs", {}).items() if v}
    manifest = {
        "command": args.command,
        "argv": argv,
        "args": {k: v for k, v in vars(args).items() if k != "fn"},
        "config": cfg,
        "resolved": info.get("config", {}),
        "inputs": {k: {"path": v, "sha256": _sha256(v)} for k, v in inputs.items()},
        "outputs": info.get("outputs", []),
        "git_describe": git_describe(),
        "seed": args.seed,
        "wall_clock_seconds": time.perf_counter() - start,
    }
    _write_json(os.path.join(args.out, "manifest.json"), manifest)
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
