"""Command-line entry point: ``sanreid <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .adapters import VEHICLEID_TEST_SIZES, load_vehicleid, load_veri
from .config import RunConfig
from .datamodel import load_manifest, write_manifest
from .errors import ConfigError, DataError
from .evaluation import PROTOCOLS, EvalReport, evaluate_model, extract_descriptors
from .network import BRANCHES, load_checkpoint
from .softlabel import AttributePredictor, assign_soft_labels, train_attr_predictor, withhold_attributes, write_audit
from .synth import synth_generate
from .training import train

log = logging.getLogger("sanreid")

# (label, branch, q) rows in the order of the ablation table
ABLATION_ROWS = (
    ("L_ID", "id", None),
    ("L_ID+L_Model", "attr", None),
    ("stripe q=2", "stripe", 2),
    ("stripe q=4", "stripe", 4),
    ("stripe q=8", "stripe", 8),
    ("SAN q=8", "full", 8),
)


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {}
    for flag, key in (("seed", "seed"), ("out", "out_dir"), ("branch", "branch"), ("q", "q"),
                      ("protocol", "protocol"), ("manifest", "manifest"), ("epochs", "epochs")):
        val = getattr(args, flag, None)
        if val is not None:
            changes[key] = val
    return cfg.replace(**changes) if changes else cfg


def _checkpoint_for(path, manifest):
    # eval-only manifests (no train records) carry no identity label space to check
    c = manifest.num_identities if manifest.num_identities > 0 else None
    return load_checkpoint(path, c, max(manifest.num_attributes, 1))


# ------------------------------------------------------------ subcommands


def cmd_synth(args):
    manifest = synth_generate(args.out, args.num_ids, args.imgs_per_id, args.num_attrs, args.seed,
                              args.size, args.holdout)
    path = Path(args.out) / "manifest.jsonl"
    if args.withhold:
        manifest, withheld = withhold_attributes(manifest, args.withhold, args.seed)
        write_manifest(manifest, path)
        (Path(args.out) / "withheld.json").write_text(json.dumps({str(k): v for k, v in withheld.items()}))
    print(path)


def cmd_import(args):
    if args.dataset == "vehicleid":
        manifest = load_vehicleid(args.root, args.test_size)
    else:
        manifest = load_veri(args.root)
    path = write_manifest(manifest, args.out)
    counts = {s: len(manifest.split(s)) for s in ("train", "gallery", "probe")}
    print(json.dumps({"manifest": str(path), **counts}))


def cmd_train(args):
    cfg = load_config(args)
    cfg.validate()
    model, history = train(cfg)
    print(json.dumps({"out_dir": cfg.out_dir, "steps": len(history),
                      "first_total": history[0]["total"], "last_total": history[-1]["total"]}))


def cmd_eval(args):
    cfg = load_config(args)
    manifest = load_manifest(args.manifest or cfg.eval_manifest or cfg.manifest)
    model, blob = _checkpoint_for(args.checkpoint, manifest)
    report = evaluate_model(model, manifest, cfg.protocol, cfg.eval_batch_size, cfg.pixel_mean, cfg.pixel_std,
                            repeats=args.repeats, seed=cfg.seed)
    out = Path(args.out or cfg.out_dir)
    report.save(out / "report.json")
    report.save_cmc_csv(out / "cmc.csv")
    print(json.dumps({"rank1": report.rank1, "mAP": report.map, "protocol": report.protocol}))
    return report


def cmd_extract(args):
    cfg = load_config(args)
    manifest = load_manifest(args.manifest or cfg.manifest)
    model, _ = _checkpoint_for(args.checkpoint, manifest)
    splits = args.split or ["gallery", "probe"]
    records = manifest.split(*splits)
    feats = extract_descriptors(model, manifest, records, cfg.eval_batch_size, cfg.pixel_mean, cfg.pixel_std)
    out = Path(args.out or Path(cfg.out_dir) / "descriptors.npz")
    out.parent.mkdir(parents=True, exist_ok=True)
    feats.save(out)
    print(json.dumps({"path": str(out), "shape": list(feats.features.shape)}))
    return feats


def cmd_softlabel(args):
    manifest = load_manifest(args.manifest)
    pred_path = Path(args.predictor)
    if args.train:
        cfg = load_config(args)
        predictor = train_attr_predictor(manifest, cfg)
        predictor.save(pred_path)
        mean, std = cfg.pixel_mean, cfg.pixel_std
    else:
        predictor = AttributePredictor.load(pred_path)
        mean = std = None
    audit = []
    labelled = assign_soft_labels(manifest, predictor, mean, std, audit=audit)
    out = Path(args.out)
    write_manifest(labelled, out)
    write_audit(audit, out.with_suffix(".audit.jsonl"))
    print(json.dumps({"manifest": str(out), "soft_labelled": len(audit)}))


def run_ablation(cfg: RunConfig, manifest, seeds=(0,), rows=ABLATION_ROWS, out_dir=None):
    """Train and evaluate every ablation row for every seed.

    Returns a list of dicts with per-seed and mean rank-1 / rank-5 / mAP.
    """
    table = []
    for label, branch, q in rows:
        per_seed = []
        for seed in seeds:
            row_cfg = cfg.replace(branch=branch, q=q or cfg.q, seed=seed)
            run_dir = Path(out_dir) / f"{branch}_q{row_cfg.q}_s{seed}" if out_dir else None
            model, history = train(row_cfg, manifest, out_dir=run_dir, write=run_dir is not None)
            report = evaluate_model(model, manifest, cfg.protocol, cfg.eval_batch_size,
                                    cfg.pixel_mean, cfg.pixel_std, seed=seed)
            if run_dir is not None:
                report.save(run_dir / "report.json")
            per_seed.append({"seed": seed, "rank1": report.rank1, "rank5": report.cmc[min(4, len(report.cmc) - 1)],
                             "mAP": report.map, "final_loss": history[-1]["total"]})
            log.info("%s seed %d rank1 %.3f mAP %.3f", label, seed, report.rank1, report.map)
        table.append({
            "setting": label,
            "branch": branch,
            "q": q,
            "runs": per_seed,
            "rank1": float(np.mean([r["rank1"] for r in per_seed])),
            "rank5": float(np.mean([r["rank5"] for r in per_seed])),
            "mAP": float(np.mean([r["mAP"] for r in per_seed])),
        })
    return table


def cmd_ablate(args):
    cfg = load_config(args)
    manifest = load_manifest(cfg.manifest) if cfg.manifest else None
    if manifest is None:
        raise ConfigError("ablation needs a manifest (--manifest or config)")
    seeds = list(range(cfg.seed, cfg.seed + args.num_seeds))
    out = Path(cfg.out_dir)
    table = run_ablation(cfg, manifest, seeds, out_dir=out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(table, indent=2))
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["setting", "branch", "q", "rank1", "rank5", "mAP"])
        for row in table:
            w.writerow([row["setting"], row["branch"], row["q"] or "", row["rank1"], row["rank5"], row["mAP"]])
    for row in table:
        print(f"{row['setting']:<14} rank1={row['rank1']:.3f} rank5={row['rank5']:.3f} mAP={row['mAP']:.3f}")
    return table


def cmd_plot(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    reports = [(Path(p).parent.name or Path(p).stem, EvalReport.load(p)) for p in args.reports]
    if not reports:
        raise DataError("plot needs at least one report")
    max_rank = args.max_rank
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    labels = args.labels or [name for name, _ in reports]
    if len(labels) != len(reports):
        raise ConfigError("--labels must match the number of reports")
    fig, ax = plt.subplots(figsize=(5, 4))
    rows = []
    for label, (_, rep) in zip(labels, reports):
        cmc = np.asarray(rep.cmc[:max_rank])
        ranks = np.arange(1, len(cmc) + 1)
        ax.plot(ranks, cmc * 100, marker="o", ms=3, label=label)
        rows += [(label, int(k), float(v)) for k, v in zip(ranks, cmc)]
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate (%)")
    ax.set_xlim(1, max_rank)
    if max_rank == 20:
        ax.set_xticks([1, 5, 10, 15, 20])
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
    csv_path = out.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["report", "rank", "rate"])
        w.writerows(rows)
    print(json.dumps({"figure": str(out), "csv": str(csv_path)}))
    return out, csv_path


# ------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sanreid", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        return sp

    sp = common(sub.add_parser("train", help="train a model"))
    sp.add_argument("--manifest")
    sp.add_argument("--branch", choices=BRANCHES)
    sp.add_argument("--q", type=int)
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest")
    sp.add_argument("--protocol", choices=PROTOCOLS)
    sp.add_argument("--repeats", type=int, default=1)
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("extract", help="write descriptors to .npz"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest")
    sp.add_argument("--split", nargs="+", choices=["train", "gallery", "probe"])
    sp.set_defaults(func=cmd_extract)

    sp = common(sub.add_parser("softlabel", help="assign predicted attributes to unlabelled records"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--predictor", required=True, help="predictor checkpoint (written when --train)")
    sp.add_argument("--train", action="store_true", help="train the predictor first")
    sp.set_defaults(func=cmd_softlabel)

    sp = common(sub.add_parser("ablate", help="run the branch / q ablation grid"))
    sp.add_argument("--manifest")
    sp.add_argument("--protocol", choices=PROTOCOLS)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--num-seeds", type=int, default=1)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("plot", help="plot CMC curves from report JSON files")
    sp.add_argument("reports", nargs="+")
    sp.add_argument("--out", required=True, help="figure path (.png); CSV written alongside")
    sp.add_argument("--labels", nargs="+")
    sp.add_argument("--max-rank", type=int, default=20)
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("synth", help="generate the synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--num-ids", type=int, default=20)
    sp.add_argument("--imgs-per-id", type=int, default=8)
    sp.add_argument("--num-attrs", type=int, default=4)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--size", type=int, default=128)
    sp.add_argument("--holdout", type=int, default=3)
    sp.add_argument("--withhold", type=float, default=0.0, help="fraction of train attributes to strip")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("import", help="write a manifest for a VehicleID or VeRi directory")
    sp.add_argument("dataset", choices=["vehicleid", "veri"])
    sp.add_argument("--root", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--test-size", type=int, choices=VEHICLEID_TEST_SIZES, default=800)
    sp.set_defaults(func=cmd_import)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
