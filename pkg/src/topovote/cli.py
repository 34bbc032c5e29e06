"""Command-line pipeline driver.

Subcommands cover the full workflow: train reference classifiers, build
an adversarial training set against them, train misdirected members,
assemble and evaluate the voting defense, and sweep the loss weight.
Exit codes: 0 success, 1 usage problem, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import os
import sys

import numpy as np

from . import attack as atk
from . import checkpoint as ck
from . import config
from . import derange
from . import ensemble
from . import evaluation
from . import gradnet as gn
from . import topo
from .config import ConfigError
from .seeding import derive_seed, spawn_rng


def _accuracy(net, batch):
    return float(np.mean(gn.predict(net, batch.inputs) == batch.labels))


def _require(cfg, key):
    if not cfg[key]:
        raise ConfigError(f"the {key!r} config key is required for this command")
    return cfg[key]


def _train_config(cfg):
    return topo.TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"],
        optimizer=cfg["optimizer"], lr=cfg["lr"], momentum=cfg["momentum"])


def _attack_config(cfg):
    return atk.AttackConfig(
        epsilon=cfg["attack_eps"], norm=cfg["attack_norm"],
        alpha=cfg["attack_alpha"] or None, iterations=cfg["attack_iters"],
        random_init=cfg["random_init"], transform_prob=cfg["transform_prob"],
        max_translate=cfg["max_translate"])


def _build_net(cfg, ds, label):
    return config.build_arch(cfg["arch"], ds.input_shape, ds.num_classes,
                             cfg["hidden"], spawn_rng(cfg["seed"], label))


def _subsample(split, count, rng):
    if count <= 0:
        return split
    idx = evaluation.stratified_subsample(split.labels, count, rng)
    return gn.Batch(split.inputs[idx], split.labels[idx])


def cmd_train_std(args, cfg):
    out = _require(cfg, "net_out")
    ds = config.load_dataset(cfg)
    net = _build_net(cfg, ds, "init-std")
    net, _ = topo.train_standard(net, ds.train, _train_config(cfg),
                                 spawn_rng(cfg["seed"], "train-std"))
    val, test = _accuracy(net, ds.val), _accuracy(net, ds.test)
    ck.save_checkpoint(net, out, metadata={
        "kind": "standard", "arch": cfg["arch"], "seed": cfg["seed"],
        "val_accuracy": val, "test_accuracy": test,
        "config_digest": config.config_digest(cfg)})
    print(f"saved {out} val_accuracy={val:.4f} test_accuracy={test:.4f}")
    return 0


def cmd_make_advset(args, cfg):
    out = _require(cfg, "advset_out")
    paths = _require(cfg, "surrogates")
    ds = config.load_dataset(cfg)
    surrogates = [ck.load_checkpoint(p) for p in paths]
    split = _subsample(ds.train, cfg["advset_count"],
                       spawn_rng(cfg["seed"], "advset-subsample"))
    advset = atk.build_transfer_set(
        surrogates, split, "all", _attack_config(cfg),
        epsilons=list(cfg["epsilons"]),
        master_seed=derive_seed(cfg["seed"], "make-advset"),
        source_tag="advset")
    ck.save_advset(advset, out)
    print(f"saved {out} with {len(advset)} records, "
          f"epsilons {list(advset.epsilons)}")
    return 0


def cmd_train_topo(args, cfg):
    out = _require(cfg, "net_out")
    adv_path = _require(cfg, "advset_in")
    mapping = _require(cfg, "derangement")
    ds = config.load_dataset(cfg)
    advset = ck.load_advset(adv_path)
    d = derange.Derangement(np.asarray(mapping))
    spec = topo.TopoSpec(d, cfg["lam"])
    net = _build_net(cfg, ds, "init-topo")
    net, _ = topo.train_topo(net, ds.train, advset, spec, _train_config(cfg),
                             spawn_rng(cfg["seed"], "train-topo"))
    val, test = _accuracy(net, ds.val), _accuracy(net, ds.test)
    t, m = topo.tsr(net, advset), topo.msr(net, advset, d)
    ck.save_checkpoint(net, out, metadata={
        "kind": "topo", "arch": cfg["arch"], "seed": cfg["seed"],
        "derangement": list(d.as_tuple()), "lam": cfg["lam"],
        "val_accuracy": val, "test_accuracy": test, "tsr": t, "msr": m,
        "config_digest": config.config_digest(cfg)})
    print(f"saved {out} val_accuracy={val:.4f} test_accuracy={test:.4f} "
          f"tsr={t:.4f} msr={m:.4f}")
    return 0


def cmd_derange(args, cfg):
    classes = args.classes
    count = args.count
    if classes < 2:
        raise ConfigError("--classes must be at least 2")
    if count < 1:
        raise ConfigError("--count must be at least 1")
    rng = spawn_rng(cfg["seed"], "derange")
    if count <= classes - 1:
        dset = derange.sample_disjoint_set(classes, count, rng)
    else:
        dset = derange.grouped_sets(classes, count, rng)
    for member in dset.members:
        print(" ".join(str(v) for v in member.as_tuple()))
    return 0


def cmd_attack(args, cfg):
    out = _require(cfg, "advset_out")
    net_path = _require(cfg, "net_in")
    ds = config.load_dataset(cfg)
    net = ck.load_checkpoint(net_path)
    split = _subsample(ds.test, cfg["advset_count"],
                       spawn_rng(cfg["seed"], "attack-subsample"))
    advset = atk.build_transfer_set(
        [net], split, "all", _attack_config(cfg),
        epsilons=[cfg["attack_eps"]],
        master_seed=derive_seed(cfg["seed"], "attack"),
        source_tag="attack")
    ck.save_advset(advset, out)
    print(f"saved {out} with {len(advset)} records; "
          f"tsr against the attacked net: {topo.tsr(net, advset):.4f}")
    return 0


def cmd_eval(args, cfg):
    ds = config.load_dataset(cfg)
    if cfg["manifest_in"] and cfg["members"]:
        raise ConfigError("give either members or manifest_in, not both")
    if cfg["manifest_in"]:
        defense = ensemble.load_ensemble(cfg["manifest_in"])
    elif cfg["members"]:
        nets = tuple(ck.load_checkpoint(p) for p in cfg["members"])
        defense = ensemble.NmlEnsemble(nets, len(nets))
    else:
        raise ConfigError("eval needs the members or manifest_in key")
    surrogates = None
    if cfg["scenario"] in ("black", "grey"):
        surrogates = tuple(ck.load_checkpoint(p)
                           for p in _require(cfg, "surrogates"))
    elif cfg["surrogates"]:
        raise ConfigError("the white scenario must not list surrogates")
    scenario = evaluation.ScenarioConfig(
        cfg["scenario"], _attack_config(cfg), surrogates=surrogates,
        sample_budget=cfg["sample_budget"])
    report = evaluation.run_scenario(scenario, defense, ds.test,
                                     master_seed=cfg["seed"])
    csv_path, json_path = evaluation.write_report(report, cfg["out_dir"])
    for row in report.rows:
        print("tau={tau} benign_accuracy={benign_accuracy:.4f} "
              "attack_success_rate={attack_success_rate:.4f} "
              "abstain_rate_benign={abstain_rate_benign:.4f} "
              "abstain_rate_adv={abstain_rate_adv:.4f}".format(**row))
    print(f"wrote {csv_path} and {json_path}")
    return 0


def cmd_sweep_lambda(args, cfg):
    adv_path = _require(cfg, "advset_in")
    mapping = _require(cfg, "derangement")
    ds = config.load_dataset(cfg)
    advset = ck.load_advset(adv_path)
    d = derange.Derangement(np.asarray(mapping))
    init = _build_net(cfg, ds, "init-sweep")
    rows = []
    for lam in cfg["lambdas"]:
        net, _ = topo.train_topo(
            init.clone(), ds.train, advset, topo.TopoSpec(d, lam),
            _train_config(cfg), spawn_rng(cfg["seed"], "sweep-train", repr(lam)))
        rows.append((lam, _accuracy(net, ds.val), topo.tsr(net, advset),
                     topo.msr(net, advset, d)))
        print(f"lambda={lam} val_accuracy={rows[-1][1]:.4f} "
              f"tsr={rows[-1][2]:.4f} msr={rows[-1][3]:.4f}")
    os.makedirs(cfg["out_dir"], exist_ok=True)
    path = os.path.join(cfg["out_dir"], f"sweep_lambda_seed{cfg['seed']}.csv")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("lambda", "val_accuracy", "tsr", "msr"))
    for row in rows:
        writer.writerow([repr(v) for v in row])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())
    print(f"wrote {path}")
    return 0


COMMANDS = {
    "train-std": (cmd_train_std, "train a standard reference classifier"),
    "make-advset": (cmd_make_advset,
                    "build the adversarial training set against surrogates"),
    "train-topo": (cmd_train_topo,
                   "train a misdirected member against an advset"),
    "derange": (cmd_derange, "sample pairwise-disagreeing derangements"),
    "attack": (cmd_attack, "attack one checkpoint over the test split"),
    "eval": (cmd_eval, "run a scenario against the voting defense"),
    "sweep-lambda": (cmd_sweep_lambda,
                     "train at several loss weights and tabulate the tradeoff"),
}


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="topovote",
        description="Misdirection-trained voting defense pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        if name == "derange":
            p.add_argument("--classes", type=int, required=True,
                           help="number of classes")
            p.add_argument("--count", type=int, default=1,
                           help="how many derangements to emit")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage problems; this tool reserves 2 for
        # runtime failures
        return 0 if exc.code in (0, None) else 1
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    try:
        cfg = (config.parse_config(args.config) if args.config
               else config.default_config())
        if args.seed is not None:
            cfg["seed"] = args.seed
        return COMMANDS[args.command][0](args, cfg)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
