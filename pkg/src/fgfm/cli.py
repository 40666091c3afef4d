"""Command-line entry point: gen-data, train, eval, ablate, visualize.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric failure.
"""
import argparse
import dataclasses
import json
import logging
import os
import sys
import time

import numpy as np

from . import data as D
from . import model as M
from .config import dump_config, load_config, parse_overrides
from .errors import (ConfigError, EvaluationError, FormatError, NonFiniteError, SpecError,
                     TrainingError, UsageError, SelectionError, DimensionError)
from .mhv import naive_select
from .training import load_inputs, score_inputs, train_model

log = logging.getLogger("fgfm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SPLITS = ("train", "dev", "test")


def _common(parser):
    parser.add_argument("--config", help="INI run configuration")
    parser.add_argument("--seed", type=int, help="overrides model.seed and train.seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="config override, e.g. --set train.epochs=3 (repeatable)")
    parser.add_argument("--no-daff", action="store_true", help="ablation: skip cross-attention/DAFF fusion")
    parser.add_argument("--no-enhancement", action="store_true", help="ablation: no kernel smoothing of votes")
    parser.add_argument("--votes", help="votes per head (ablate accepts a comma list)")
    # accepted after the subcommand too; SUPPRESS keeps the top-level value otherwise
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)


def build_parser():
    parser = argparse.ArgumentParser(prog="fgfm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="write train/dev/test manifests")
    _common(p)

    p = subs.add_parser("train", help="train a model and write a checkpoint")
    _common(p)

    p = subs.add_parser("eval", help="score a split with a checkpoint and report EER")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")

    p = subs.add_parser("ablate", help="train/evaluate a grid of ablation cells")
    _common(p)

    p = subs.add_parser("visualize", help="export selected-frame overlays")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--utt", action="append", default=[], help="utterance id (repeatable)")
    p.add_argument("--limit", type=int, default=4, help="number of utterances when --utt is absent")
    return parser


def resolve_config(args):
    overrides = parse_overrides(args.overrides)
    if args.seed is not None:
        overrides[("model", "seed")] = str(args.seed)
        overrides[("train", "seed")] = str(args.seed)
    if args.no_daff:
        overrides[("model", "no_daff")] = "true"
    if args.no_enhancement:
        overrides[("model", "no_enhancement")] = "true"
    if args.votes is not None:
        if args.command == "ablate":
            overrides[("ablate", "votes")] = args.votes
        else:
            overrides[("model", "votes")] = args.votes
    if args.config and not os.path.exists(args.config):
        raise UsageError(f"config file {args.config} does not exist")
    return load_config(args.config, overrides)


def _out_dir(args, default):
    out = args.out or default
    os.makedirs(out, exist_ok=True)
    return out


def _manifest_path(cfg, split):
    return os.path.join(cfg.data.manifest_dir, f"{split}.txt")


def _load_split(cfg, split, model_cfg):
    path = _manifest_path(cfg, split)
    if not os.path.exists(path):
        raise FileNotFoundError(f"manifest {path} not found (run gen-data first)")
    entries = D.read_manifest(path)
    inputs, labels, masks = load_inputs(entries, model_cfg, cfg.data)
    return entries, inputs, labels, masks


def _write_jsonl(path, records, mode="w"):
    with open(path, mode) as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg):
    out = _out_dir(args, cfg.data.manifest_dir)
    mc = cfg.model_config()
    T = int(round(cfg.data.sample_rate * cfg.data.duration)) // mc.stride_product
    if T < mc.votes:
        raise SpecError(f"utterances have {T} frames, fewer than {mc.votes} votes")
    sizes = {"train": cfg.data.num_train, "dev": cfg.data.num_dev, "test": cfg.data.num_test}
    window = (cfg.data.window_min, cfg.data.window_max)
    for k, split in enumerate(SPLITS):
        entries = D.make_manifest(sizes[split], cfg.data.seed + k, T, prefix=f"{split}_",
                                  artifact_kind=cfg.data.artifact_kind, window_frac=window)
        D.write_manifest(entries, os.path.join(out, f"{split}.txt"))
        if mc.frontend == "feature_file":
            feat_dir = cfg.data.feature_dir or os.path.join(out, "features")
            os.makedirs(feat_dir, exist_ok=True)
            for e in entries:
                wave, _ = D.generate_utterance(e.synth_spec(**cfg.data.synth_kwargs(mc.stride_product)))
                D.write_feature_file(D.frame_features(wave, mc.stride_product, mc.feature_dim),
                                     os.path.join(feat_dir, f"{e.utt_id}.fgft"))
        log.info("wrote %d %s utterances (%d frames each)", len(entries), split, T)
    dump_config(dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, manifest_dir=out)),
                os.path.join(out, "config.ini"))
    print(json.dumps({"manifest_dir": out, "frames": T, **sizes}))
    return EXIT_OK


def cmd_train(args, cfg):
    out = _out_dir(args, "run")
    mc = cfg.model_config()
    tr_entries, tr_inputs, tr_labels, _ = _load_split(cfg, "train", mc)
    dev_entries, dev_inputs, _, _ = _load_split(cfg, "dev", mc)
    dump_config(cfg, os.path.join(out, "config.ini"))
    log_path = os.path.join(out, "train_log.jsonl")
    open(log_path, "w").close()

    def on_epoch(record):
        _write_jsonl(log_path, [record], "a")
        log.info("epoch %d loss %.4f dev_eer %.4f", record["epoch"], record["loss"], record.get("dev_eer", -1))

    t0 = time.perf_counter()
    params, history = train_model(tr_entries, tr_inputs, tr_labels, mc, cfg.train,
                                  dev_entries, dev_inputs, log=on_epoch)
    M.quantize_parameters(params)
    records, _ = score_inputs(dev_entries, dev_inputs, params, mc)
    eer, threshold = D.compute_eer(records)
    final = {"epoch": "final", "dev_eer": eer, "threshold": threshold, "checkpoint": "model.ckpt"}
    _write_jsonl(log_path, [final], "a")
    M.save_checkpoint(os.path.join(out, "model.ckpt"), params, mc)
    log.info("trained in %.1fs", time.perf_counter() - t0)
    print(json.dumps(final))
    return EXIT_OK


def cmd_eval(args, cfg):
    out = _out_dir(args, os.path.dirname(os.path.abspath(args.checkpoint)))
    params, mc = M.load_checkpoint(args.checkpoint)
    entries, inputs, _, _ = _load_split(cfg, args.split, mc)
    records, _ = score_inputs(entries, inputs, params, mc)
    D.write_score_file(records, os.path.join(out, f"scores_{args.split}.txt"))
    eer, threshold = D.compute_eer(records)
    result = {"split": args.split, "eer": eer, "threshold": threshold, "num_utterances": len(records)}
    with open(os.path.join(out, f"eval_{args.split}.json"), "w") as fh:
        json.dump(result, fh, sort_keys=True)
    print(json.dumps(result))
    return EXIT_OK


VARIANT_FLAGS = {
    "full": {},
    "no_enhancement": {"no_enhancement": True},
    "no_daff": {"no_daff": True},
    "baseline": {"use_fgfm": False},
}


def ablation_cells(cfg, args=None):
    variants = list(cfg.ablate.variants)
    if args is not None and (args.no_daff or args.no_enhancement):
        variants = ["full"] + (["no_enhancement"] if args.no_enhancement else []) + \
                   (["no_daff"] if args.no_daff else [])
    cells = []
    for seed in cfg.ablate.seeds:
        for votes in cfg.ablate.votes:
            for variant in variants:
                cells.append({"cell": len(cells), "variant": variant, "votes": int(votes), "seed": int(seed)})
    if not cells:
        raise UsageError("empty ablation grid")
    return cells


def run_cell(cell, cfg, train_split, test_split, oracle_checks=8):
    flags = {"no_daff": False, "no_enhancement": False, "use_fgfm": True}
    flags.update(VARIANT_FLAGS[cell["variant"]])
    mc = cfg.model_config(votes=cell["votes"], seed=cell["seed"], **flags)
    tc = dataclasses.replace(cfg.train, seed=cell["seed"])
    tr_entries, tr_inputs, tr_labels, _ = train_split
    te_entries, te_inputs, _, _ = test_split
    params, history = train_model(tr_entries, tr_inputs, tr_labels, mc, tc)
    records, diags = score_inputs(te_entries, te_inputs, params, mc)
    eer, _ = D.compute_eer(records)
    result = dict(cell, eer=eer, final_loss=history[-1]["loss"])
    if mc.use_fgfm:
        ok = True
        for diag in diags[:oracle_checks]:
            for attn, sel in zip(diag.attention, diag.selections):
                ok &= naive_select(attn, mc.votes, not mc.no_enhancement) == sel.indices
        result["mhv_oracle_ok"] = bool(ok)
    return result


def format_ablation(results):
    lines = [f"{'cell':>4}  {'variant':<15}{'votes':>6}{'seed':>6}{'EER':>10}"]
    for r in results:
        lines.append(f"{r['cell']:>4}  {r['variant']:<15}{r['votes']:>6}{r['seed']:>6}{r['eer']:>10.4f}")
    lines.append("")
    lines.append("mean EER over seeds")
    lines.append(f"{'variant':<15}{'votes':>6}{'mean EER':>10}{'vs full':>10}")
    summary = summarize_ablation(results)
    for row in summary:
        delta = "" if row["delta_vs_full"] is None else f"{row['delta_vs_full']:+.4f}"
        lines.append(f"{row['variant']:<15}{row['votes']:>6}{row['mean_eer']:>10.4f}{delta:>10}")
    return "\n".join(lines) + "\n"


def summarize_ablation(results):
    groups = {}
    for r in results:
        groups.setdefault((r["variant"], r["votes"]), []).append(r["eer"])
    rows = []
    for (variant, votes), eers in groups.items():
        full = groups.get(("full", votes))
        mean = float(np.mean(eers))
        rows.append({"variant": variant, "votes": votes, "mean_eer": mean,
                     "delta_vs_full": None if full is None or variant == "full" else mean - float(np.mean(full))})
    return rows


def cmd_ablate(args, cfg):
    cells = ablation_cells(cfg, args)
    out = _out_dir(args, "ablation")
    base = cfg.model_config()
    train_split = _load_split(cfg, "train", base)
    test_split = _load_split(cfg, "test", base)
    results = []
    for cell in cells:
        res = run_cell(cell, cfg, train_split, test_split)
        log.info("cell %d %s v=%d seed=%d EER %.4f", res["cell"], res["variant"], res["votes"],
                 res["seed"], res["eer"])
        results.append(res)
    _write_jsonl(os.path.join(out, "ablation.jsonl"), results)
    table = format_ablation(results)
    with open(os.path.join(out, "ablation.txt"), "w") as fh:
        fh.write(table)
    print(table, end="")
    return EXIT_OK


def cmd_visualize(args, cfg):
    from .viz import render_overlay, selection_record

    out = _out_dir(args, "viz")
    params, mc = M.load_checkpoint(args.checkpoint)
    if not mc.use_fgfm:
        raise UsageError("visualize needs a model trained with use_fgfm=true")
    path = _manifest_path(cfg, args.split)
    if not os.path.exists(path):
        raise FileNotFoundError(f"manifest {path} not found")
    entries = D.read_manifest(path)
    if args.utt:
        by_id = {e.utt_id: e for e in entries}
        missing = [u for u in args.utt if u not in by_id]
        if missing:
            raise UsageError(f"unknown utterance ids {missing}")
        entries = [by_id[u] for u in args.utt]
    else:
        entries = entries[:args.limit]
    inputs, _, masks = load_inputs(entries, mc, cfg.data)
    written = []
    for e, x, mask in zip(entries, inputs, masks):
        _, diag = M.predict(x, params, mc)
        record = selection_record(e, diag, mask)
        with open(os.path.join(out, f"{e.utt_id}.json"), "w") as fh:
            json.dump(record, fh, sort_keys=True)
        if diag.frontend_activation is not None:
            render_overlay(record, diag.frontend_activation, os.path.join(out, f"{e.utt_id}.png"),
                           mc.frontend_strides[1])
        written.append(e.utt_id)
    print(json.dumps({"out": out, "utterances": written}))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "visualize": cmd_visualize,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"fgfm: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, SpecError, EvaluationError, SelectionError, DimensionError, OSError) as exc:
        print(f"fgfm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, TrainingError, FloatingPointError) as exc:
        print(f"fgfm: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
