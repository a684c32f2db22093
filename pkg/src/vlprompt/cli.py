"""Command line entry point: ``vlprompt <verb> [flags]``."""
import argparse
import json
import logging
import os
import sys
import time

from . import experiments as ex
from . import report
from .exceptions import VLPromptError
from .vlm import VLModel, desk_configs, pretrain, save

logger = logging.getLogger("vlprompt")


def _load_json(path):
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _experiment_config(args):
    data = _load_json(args.config)
    if args.checkpoint:
        data["checkpoint"] = args.checkpoint
    if args.out:
        data["out_dir"] = args.out
    if args.seed is not None:
        data["seeds"] = [args.seed]
    data.setdefault("methods", ["zero_shot"])
    return ex.ExperimentConfig.from_dict(data)


def _write(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def cmd_pretrain(args):
    raw = _load_json(args.config)
    seed = args.seed if args.seed is not None else raw.pop("seed", 0)
    raw.pop("seed", None)
    lm, ve, cc, oc = desk_configs(raw)
    path = args.checkpoint or os.path.join(args.out or ".", "model.vlmc")
    t0 = time.time()
    model = VLModel.create(seed, lm, ve)
    pretrain(model, cc, oc)
    model.freeze()
    save(model, path)
    acc = model.meta["pretrain"]["caption_accuracy"]
    print(f"saved {path}: caption accuracy {acc:.4f}, {time.time() - t0:.0f}s")
    return 0


def cmd_run(args):
    cfg = _experiment_config(args)
    records = ex.run(cfg, jobs=args.jobs)
    if cfg.out_dir:
        shift = "in_dist" if "in_dist" in cfg.shifts else cfg.shifts[0]
        for regime in sorted({r.regime for r in records}):
            report.plot(records, "accuracy_vs_nclasses", os.path.join(cfg.out_dir, f"accuracy_{regime}.svg"),
                        shift=shift, regime=regime)
    else:
        sys.stdout.write(ex.records_csv(records))
    print(f"{len(records)} records", file=sys.stderr)
    return 0


def _results_path(args):
    if args.results:
        return args.results
    if args.out:
        return os.path.join(args.out, "results.csv")
    raise VLPromptError("pass --results <csv> or --out <dir> holding results.csv")


def cmd_tabulate(args):
    records = ex.read_records(_results_path(args))
    if args.layout == "trend":
        text, ok = report.trend_report(records)
        if args.out:
            _write(os.path.join(args.out, "trend_report.md"), text)
        sys.stdout.write(text)
        return 0
    md, csv_text, warnings = report.tabulate(records, args.layout)
    if args.out:
        _write(os.path.join(args.out, f"{args.layout}.md"), md)
        _write(os.path.join(args.out, f"{args.layout}.csv"), csv_text)
    sys.stdout.write(md)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def cmd_plot(args):
    if args.style == "loss_curves":
        data = ex.read_curves(args.results or os.path.join(args.out or ".", "curves.csv"))
    else:
        data = ex.read_records(_results_path(args))
    name = args.style if args.style == "loss_curves" else f"{args.style}_{args.regime}_{args.shift}"
    path = os.path.join(args.out or ".", f"{name.replace(':', '_')}.svg")
    report.plot(data, args.style, path, shift=args.shift, regime=args.regime)
    print(path)
    return 0


def cmd_ablate(args):
    cfg = _experiment_config(args)
    counts = [int(c) for c in args.counts.split(",")]
    curves = ex.ablate_tokens(cfg, counts)
    out = cfg.out_dir or "."
    _write(os.path.join(out, "curves.csv"), ex.curves_csv(curves))
    report.plot(curves, "loss_curves", os.path.join(out, "loss_curves.svg"))
    for c in curves:
        if c.split == "train":
            print(f"{c.method} n_context={c.n_context} seed={c.seed} final train loss {c.losses[-1]:.4f}")
    return 0


def cmd_selftest(args):
    from .selftest import main as selftest_main
    return selftest_main()


def build_parser():
    p = argparse.ArgumentParser(prog="vlprompt", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, jobs=False):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--checkpoint", help="model checkpoint path")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="overrides the config seed(s)")
        if jobs:
            sp.add_argument("--jobs", type=int, default=1, help="worker processes")
        return sp

    common(sub.add_parser("pretrain", help="train and freeze the toy model")).set_defaults(func=cmd_pretrain)
    common(sub.add_parser("run", help="evaluate methods over shifts and seeds"), jobs=True).set_defaults(func=cmd_run)
    sp = common(sub.add_parser("ablate", help="loss curves for several context lengths"))
    sp.add_argument("--counts", default="32,64,128", help="comma-separated context token counts")
    sp.set_defaults(func=cmd_ablate)
    sp = sub.add_parser("tabulate", help="markdown and CSV tables from results.csv")
    sp.add_argument("--results")
    sp.add_argument("--out")
    sp.add_argument("--layout", default="base_table", choices=sorted(report.LAYOUTS) + ["trend"])
    sp.set_defaults(func=cmd_tabulate)
    sp = sub.add_parser("plot", help="SVG plots from results or loss curves")
    sp.add_argument("--results")
    sp.add_argument("--out")
    sp.add_argument("--style", default="accuracy_vs_nclasses", choices=("accuracy_vs_nclasses", "loss_curves"))
    sp.add_argument("--shift", default="in_dist")
    sp.add_argument("--regime", default="base", choices=("base", "novel"))
    sp.set_defaults(func=cmd_plot)
    sub.add_parser("selftest", help="gradient and oracle checks").set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (VLPromptError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
