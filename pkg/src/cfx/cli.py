"""Command-line entry point: ``cfx {synth,fit,mine,explain,evaluate,rules,render}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .classifier import ExternalModel, ReferenceConfig, fit_reference_classifier, load_model, save_model
from .data import atomic_write_text, load_dataset, write_dataset, zscore_stats
from .engine import ExplainOptions, SparsifyConfig, explain, load_result, save_result
from .errors import CfxError, EmptyRuleError
from .metrics import (QWeights, aggregate_report, aggregate_to_csv, entries_to_csv,
                      evaluate_result)
from .prototypes import MiningConfig, load_db, mine_prototypes, save_db
from .rules import (AttributionTensor, RuleConfig, extract_rule, feature_sigma, global_threshold,
                    load_attributions, occlusion_attribution, write_rules)
from .svg import render_overlay
from .synth import make_dataset

log = logging.getLogger("cfx")


class UsageError(CfxError):
    pass


def _setup_logging():
    level = os.environ.get("CFX_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _dir(path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"directory not found: {p}")
    return p


@contextmanager
def _model(args):
    if getattr(args, "adapter", None):
        m = ExternalModel(args.adapter)
        try:
            yield m
        finally:
            m.close()
    else:
        if not args.model:
            raise UsageError("one of --model or --adapter is required")
        if not Path(args.model).is_file():
            raise UsageError(f"model file not found: {args.model}")
        yield load_model(args.model)


def _range(text: str) -> tuple[int, int]:
    a, _, b = text.partition("-")
    return int(a), int(b or a)


def _class_index(names, value) -> int:
    if value in names:
        return names.index(value)
    try:
        return int(value)
    except ValueError:
        raise UsageError(f"unknown class {value!r}; choose from {names}") from None


def cmd_synth(args) -> int:
    stats = load_dataset(args.stats_from).stats if args.stats_from else None
    ds = make_dataset(args.n_per_class, args.timesteps, args.channels,
                      tuple(args.classes.split(",")), seed=args.seed,
                      multi_label=args.multi_label, prefix=args.prefix, stats=stats)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} records ({ds.n_timesteps}x{ds.n_channels}) to {args.out}")
    return 0


def cmd_fit(args) -> int:
    ds = load_dataset(_dir(args.dataset))
    model = fit_reference_classifier(ds, ReferenceConfig(seed=args.seed, l2=args.l2))
    save_model(model, args.out)
    acc = float(np.mean(np.all(model.predict_labels_batch(ds.signals) == ds.labels, axis=1)))
    thr = " ".join(f"{n}={t:.3f}" for n, t in zip(model.class_names, model.thresholds))
    print(f"training exact-match {acc:.4f}; thresholds {thr}")
    return 0


def cmd_mine(args) -> int:
    ds = load_dataset(_dir(args.dataset))
    cfg = MiningConfig(band=args.band, dim_range=_range(args.dims), k_range=_range(args.k),
                       seed=args.seed)
    with _model(args) as model:
        db = mine_prototypes(ds, model, cfg)
    save_db(db, args.db)
    for name in db.class_names:
        info = db.summary.get(name, {})
        n_proto = sum(1 for e in db.entries if db.class_names[e.class_index] == name)
        sil = info.get("silhouette")
        extra = f" dims={info['dims']} k={info['k']} silhouette={sil:.3f}" if sil is not None else ""
        flags = f" flags={','.join(info['flags'])}" if info.get("flags") else ""
        print(f"{name}: {info.get('n_filtered', 0)} filtered, {n_proto} prototypes{extra}{flags}")
    return 0


def _pick_variant(res, name=None):
    if name:
        v = res.variant(name)
        if v is None:
            raise UsageError(f"result has no variant {name!r}")
        return v
    v = res.variant("Aligned Sparse")
    return v if v is not None and v.valid else res.variant("Sparse")


def cmd_explain(args) -> int:
    ds = load_dataset(_dir(args.dataset))
    db = load_db(_dir(args.db))
    try:
        i = ds.index_of(args.record_id)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    sp = SparsifyConfig(initial_keep_ratio=args.keep_ratio, min_segment_len=args.min_segment)
    with _model(args) as model:
        target = _class_index(model.class_names, args.target) if args.target else None
        opts = ExplainOptions(target=target, band=args.band, sparsify=sp)
        t0 = time.perf_counter()
        res = explain(ds.series(i), model, db, opts)
        latency = time.perf_counter() - t0
    out = Path(args.out)
    save_result(res, out)
    # latency lives in a sidecar so result.json stays reproducible
    atomic_write_text(out / "timing.json", json.dumps({"latency_s": latency}) + "\n")
    print(f"query {res.query_id} [{res.initial_class}] -> {res.class_names[res.target_class]} "
          f"via prototype {res.prototype_id}")
    for v in res.variants:
        margin = v.probs[res.target_class] - model.thresholds[res.target_class]
        print(f"  {v.name:<15} valid={int(v.valid)} mask={v.mask_fraction:.4f} margin={margin:+.4f}")
    if res.flags:
        print(f"  flags: {', '.join(res.flags)}")
    print(f"  latency {latency * 1000:.1f} ms")
    if args.svg:
        v = _pick_variant(res)
        render_overlay(ds.signals[i], v.series, v.mask, args.svg,
                       title=f"{res.query_id}: {res.initial_class} -> "
                             f"{res.class_names[res.target_class]} ({v.name})")
    return 0


def cmd_evaluate(args) -> int:
    root = _dir(args.results)
    files = sorted(root.rglob("result.json"))
    if not files:
        raise UsageError(f"no result.json files under {root}")
    ds = load_dataset(_dir(args.dataset))
    sigma = args.sigma_train if args.sigma_train is not None else zscore_stats(ds).sigma
    weights = QWeights(*map(float, args.q_weights.split(","))) if args.q_weights else QWeights()
    entries = []
    with _model(args) as model:
        for f in files:
            res = load_result(f.parent)
            x = ds.signals[ds.index_of(res.query_id)]
            entries += evaluate_result(res, x, model, sigma, band=args.band, seed=args.seed,
                                       weights=weights)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "metrics.csv", entries_to_csv(entries))
    by_variant = aggregate_report(entries, ("variant",))
    by_pair = aggregate_report(entries, ("initial_class", "target_class", "variant"))
    atomic_write_text(out / "aggregate_by_variant.csv", aggregate_to_csv(by_variant, ("variant",)))
    atomic_write_text(out / "aggregate_by_pair.csv",
                      aggregate_to_csv(by_pair, ("initial_class", "target_class", "variant")))
    print(f"{len(files)} results, {len(entries)} rows")
    print(f"{'variant':<15} {'n':>4} {'validity_multi':>15} {'sparsity':>9} {'noise':>7} "
          f"{'temporal':>9} {'margin':>8}")
    for r in by_variant:
        m = r.means
        print(f"{r.key[0]:<15} {r.n:>4} {m['validity_multi']:>15.4f} {m['sparsity_ratio']:>9.4f} "
              f"{m['noise_stability']:>7.4f} {m['temporal_stability']:>9.4f} "
              f"{m['decision_margin']:>8.4f}")
    return 0


def cmd_rules(args) -> int:
    ds = load_dataset(_dir(args.dataset))
    n = min(len(ds), args.limit) if args.limit else len(ds)
    cfg = RuleConfig(percentile=args.percentile, n_perturb=args.n_perturb,
                     perturb_kind=args.perturb_kind)
    with _model(args) as model:
        if args.attr:
            attr = load_attributions(args.attr)
            attr.check_against(ds)
            values = attr.values[:n]
        elif args.occlusion:
            values = np.stack([occlusion_attribution(model, ds.signals[i], args.window)
                               for i in range(n)])
            attr = AttributionTensor(values, f"occlusion(window={args.window})")
        else:
            raise UsageError("one of --attr or --occlusion is required")
        threshold = global_threshold(values, cfg.percentile)
        sigma = feature_sigma(ds)
        preds = model.predict_labels_batch(ds.signals)
        rules, empty = [], 0
        for i in range(n):
            for j in np.flatnonzero(preds[i]):
                try:
                    rules.append(extract_rule(
                        model, ds.signals[i], values[i, j], ds, cfg, class_index=int(j),
                        threshold=threshold, sigma_f=sigma, seed=args.seed + i * 1009 + int(j),
                        record_id=ds.record_ids[i], predictions=preds))
                except EmptyRuleError as exc:
                    empty += 1
                    log.info("%s", exc)
    write_rules(rules, args.out)
    mean_conj = np.mean([len(r.conjuncts) for r in rules]) if rules else 0.0
    print(f"{len(rules)} rules ({empty} empty skipped), mean {mean_conj:.1f} conjuncts per rule, "
          f"threshold {threshold:.6g} [{attr.provenance}]")
    return 0


def cmd_render(args) -> int:
    ds = load_dataset(_dir(args.dataset))
    res = load_result(_dir(args.result))
    v = _pick_variant(res, args.variant)
    x = ds.signals[ds.index_of(res.query_id)]
    render_overlay(x, v.series, v.mask, args.out,
                   title=f"{res.query_id}: {res.initial_class} -> "
                         f"{res.class_names[res.target_class]} ({v.name})")
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--dataset", required=True, metavar="DIR")

    model = argparse.ArgumentParser(add_help=False)
    g = model.add_mutually_exclusive_group()
    g.add_argument("--model", metavar="FILE", help="reference model JSON")
    g.add_argument("--adapter", metavar="CMD", help="external model command")

    band = argparse.ArgumentParser(add_help=False)
    band.add_argument("--band", type=int, default=None,
                      help="Sakoe-Chiba half-width; default T/10, negative for unbanded")

    p = argparse.ArgumentParser(prog="cfx", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n-per-class", type=int, default=200)
    s.add_argument("--timesteps", type=int, default=500)
    s.add_argument("--channels", type=int, default=4)
    s.add_argument("--classes", default="NORM,MI,CD")
    s.add_argument("--multi-label", type=int, default=0)
    s.add_argument("--prefix", default="r")
    s.add_argument("--stats-from", metavar="DIR", help="reuse normalization of another dataset")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit", parents=[common, data], help="fit the reference classifier")
    s.add_argument("--out", required=True)
    s.add_argument("--l2", type=float, default=1.0)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("mine", parents=[common, data, model, band], help="mine prototypes")
    s.add_argument("--db", required=True, metavar="DIR")
    s.add_argument("--dims", default="2-8")
    s.add_argument("--k", default="2-10")
    s.set_defaults(func=cmd_mine)

    s = sub.add_parser("explain", parents=[common, data, model, band],
                       help="counterfactual for one record")
    s.add_argument("--db", required=True, metavar="DIR")
    s.add_argument("--record-id", required=True)
    s.add_argument("--target")
    s.add_argument("--svg")
    s.add_argument("--keep-ratio", type=float, default=0.10)
    s.add_argument("--min-segment", type=int, default=10)
    s.add_argument("--out", required=True, metavar="DIR")
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("evaluate", parents=[common, data, model, band],
                       help="metrics over a directory of results")
    s.add_argument("--results", required=True, metavar="DIR")
    s.add_argument("--out", required=True, metavar="DIR")
    s.add_argument("--sigma-train", type=float)
    s.add_argument("--q-weights", metavar="WV,WS,WST,WM")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("rules", parents=[common, data, model], help="extract interval rules")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--attr", metavar="FILE")
    src.add_argument("--occlusion", action="store_true")
    s.add_argument("--window", type=int, default=25)
    s.add_argument("--percentile", type=float, default=90.0)
    s.add_argument("--n-perturb", type=int, default=1000)
    s.add_argument("--perturb-kind", choices=["uniform", "gaussian"], default="uniform")
    s.add_argument("--limit", type=int, help="only the first N records")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rules)

    s = sub.add_parser("render", parents=[data], help="SVG overlay of a stored result")
    s.add_argument("--result", required=True, metavar="DIR")
    s.add_argument("--variant")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CfxError, ValueError, KeyError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"cfx {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
