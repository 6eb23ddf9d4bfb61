"""Command-line interface.

Every subcommand writes JSON to stdout (or ``-o``). Exit status is 0 on
success, 1 when an input fails validation and 2 on a usage error.

Defaults can come from a flat ``key=value`` file given with ``--config``;
flags on the command line take precedence. The default seed is read from
``MODBAL_SEED`` when set.
"""

import argparse
import json
import os
import sys

from .analysis import analyze
from .decoder import GenConfig, Scenario, ToyConfig, ToyDecoder, synth_batch, synth_sample, write_samples
from .errors import ModbalError
from .experiments import DEFAULT_KS, Intervention, gradcheck, run_conflict_eval, run_imbalance_sweep
from .metrics import GroupingTable, confusion_matrix, f1, ov_metrics, uar_war
from .modality import parse_dump, write_dump
from .reallocation import reallocate_dump
from .voting import EMOTIONS, partition

SEED_ENV = "MODBAL_SEED"


class UsageError(Exception):
    pass


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _range(text):
    try:
        lo, hi = (int(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}") from None
    return lo, hi


def _emit(obj, out=None):
    text = json.dumps(obj, indent=2, allow_nan=False) + "\n"
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _load_json(path):
    with open(path, "rb") as fh:
        return json.loads(fh.read())


def _read_config(path):
    """Parse a flat ``key=value`` file; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


# -- subcommands ------------------------------------------------------------


def cmd_analyze(args):
    with open(args.dump, "rb") as fh:
        dump = parse_dump(fh.read())
    _emit(analyze(dump, step=args.step, layer_range=args.mid_range, tau=args.tau), args.output)


def cmd_reallocate(args):
    with open(args.dump, "rb") as fh:
        dump = parse_dump(fh.read())
    if args.step is not None and not 0 <= args.step < len(dump.steps):
        raise ModbalError(f"step {args.step} out of range for {len(dump.steps)} steps")
    new, plans = reallocate_dump(dump, tau=args.tau, step=args.step)
    with open(args.output, "wb") as fh:
        fh.write(write_dump(new))
    _emit({"tau": args.tau, "plans": [p.to_json() for p in plans]})


def _model_config(args):
    return ToyConfig(seed=args.seed)


def cmd_simulate(args):
    config = _model_config(args)
    scenarios = tuple(Scenario) if args.scenario == "all" else (Scenario(args.scenario),)
    iv = Intervention(args.intervention, tau=args.tau, alpha=args.alpha)
    report = run_conflict_eval(config, n=args.n, intervention=iv, seed=args.seed, scenarios=scenarios,
                               fit_head=args.fit_head, workers=args.workers)
    if args.dump:
        # attention of the first sample of the first scenario
        model = ToyDecoder(config)
        sample = synth_sample(GenConfig.for_model(config), scenarios[0], args.seed)
        with open(args.dump, "wb") as fh:
            fh.write(write_dump(model.forward(sample, hook=iv.hook(config.layout), record=args.record,
                                              steps=args.steps).dump))
    if args.samples:
        gen = GenConfig.for_model(config)
        with open(args.samples, "wb") as fh:
            fh.write(write_samples([s for sc in scenarios for s in synth_batch(gen, sc, args.n, args.seed)]))
    _emit(report, args.output)


def cmd_sweep(args):
    ks = args.ks if args.ks is not None else list(DEFAULT_KS)
    report = run_imbalance_sweep(_model_config(args), ks=ks, n=args.n, seed=args.seed,
                                 uniform=args.uniform, fit_head=args.fit_head, workers=args.workers)
    _emit(report, args.output)


def cmd_partition(args):
    records = _load_json(args.labels)
    if not isinstance(records, list):
        raise ModbalError("labels file must hold a JSON array of label triples")
    labels = tuple(args.label_set.split(",")) if args.label_set else EMOTIONS
    for i, rec in enumerate(records):
        ok = (isinstance(rec, dict) and {"video", "audio", "multi"} <= rec.keys()) or \
             (isinstance(rec, list) and len(rec) == 3)
        if not ok:
            raise ModbalError(f"record {i}: expected [video, audio, multi] or an object with those keys")
    _emit(partition(records, cap=args.cap, seed=args.seed, labels=labels).to_json(), args.output)


def cmd_metrics(args):
    pred, truth = _load_json(args.pred), _load_json(args.truth)
    if not isinstance(pred, list) or not isinstance(truth, list):
        raise ModbalError("prediction and truth files must hold JSON arrays")
    if len(pred) != len(truth):
        raise ModbalError(f"{len(pred)} predictions but {len(truth)} ground-truth entries")
    if not pred:
        raise ModbalError("no samples")
    grouping = GroupingTable.from_json(_load_json(args.grouping)) if args.grouping else GroupingTable()
    if all(isinstance(x, list) for x in pred + truth):
        scores = [ov_metrics(t, p, grouping) for t, p in zip(truth, pred)]
        n = len(scores)
        acc = sum(s[0] for s in scores) / n
        rec = sum(s[1] for s in scores) / n
        _emit({"kind": "open_vocabulary", "samples": n, "accuracy": acc, "recall": rec,
               "average": (acc + rec) / 2}, args.output)
        return
    if any(isinstance(x, list) for x in pred + truth):
        raise ModbalError("mix of label sets and single labels")
    truth_g = [grouping(x) for x in truth]
    pred_g = [grouping(x) for x in pred]
    classes = sorted(set(map(str, truth_g)) | set(map(str, pred_g)))
    index = {c: i for i, c in enumerate(classes)}
    cm = confusion_matrix([index[str(x)] for x in truth_g], [index[str(x)] for x in pred_g], len(classes))
    uar, war = uar_war(cm)
    _emit({"kind": "classification", "samples": len(pred), "labels": classes,
           "confusion_matrix": cm.tolist(), "uar": uar, "war": war,
           "f1": f1(cm, args.f1), "f1_averaging": args.f1}, args.output)


def cmd_gradcheck(args):
    _emit(gradcheck(d=args.d, r=args.r, n_experts=args.n_experts, h=args.h, seed=args.seed,
                    epsilon=args.epsilon), args.output)


# -- parser -----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="modbal", description="Modality-bias analysis and mitigation toolkit.")
    p.add_argument("--config", help="flat key=value file of option defaults")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        sp.add_argument("-o", "--output", help="write JSON here instead of stdout")
        return sp

    sp = add("analyze", cmd_analyze, "bias diagnostics for an attention dump")
    sp.add_argument("dump")
    sp.add_argument("--step", type=int, default=0)
    sp.add_argument("--mid-range", type=_range, default=None, metavar="LO:HI")
    sp.add_argument("--tau", type=float, default=1.0)

    sp = add("reallocate", cmd_reallocate, "apply attention reallocation to a dump")
    sp.add_argument("dump")
    sp.add_argument("--tau", type=float, default=1.0)
    sp.add_argument("--step", type=int, default=None)

    sp = add("simulate", cmd_simulate, "conflict evaluation on the toy decoder")
    sp.add_argument("--scenario", choices=["all"] + [s.value for s in Scenario], default="all")
    sp.add_argument("--intervention", choices=["none", "ar", "pai"], default="none")
    sp.add_argument("--tau", type=float, default=1.0)
    sp.add_argument("--alpha", type=float, default=1.0)
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--fit-head", action="store_true", help="refit the class head on consistent samples")
    sp.add_argument("--dump", help="also write the attention dump of one sample here")
    sp.add_argument("--samples", help="also write the evaluated samples here")
    sp.add_argument("--record", choices=["pre", "post"], default="pre")
    sp.add_argument("--steps", type=int, default=1)

    sp = add("sweep", cmd_sweep, "audio-token duplication sweep")
    sp.add_argument("--ks", type=_int_list, default=None)
    sp.add_argument("--n", type=int, default=16)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--uniform", action="store_true", help="uniform-logit control")
    sp.add_argument("--fit-head", action="store_true", help="refit the class head per k on consistent samples")

    sp = add("partition", cmd_partition, "majority-vote subset partition")
    sp.add_argument("labels")
    sp.add_argument("--cap", type=int, default=500)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--label-set", default=None, help="comma-separated declared labels")

    sp = add("metrics", cmd_metrics, "recognition metrics")
    sp.add_argument("pred")
    sp.add_argument("truth")
    sp.add_argument("--grouping", default=None)
    sp.add_argument("--f1", choices=["weighted", "macro"], default="weighted")

    sp = add("gradcheck", cmd_gradcheck, "MoSE analytic vs finite-difference gradients")
    sp.add_argument("--d", type=int, default=8)
    sp.add_argument("--r", type=int, default=2)
    sp.add_argument("--n-experts", type=int, default=2)
    sp.add_argument("--h", type=float, default=1e-5)
    sp.add_argument("--epsilon", type=float, default=0.3)
    sp.add_argument("--seed", type=int)
    return p


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    values = _read_config(known.config)
    subparsers = parser._subparsers._group_actions[0].choices
    dests = {a.dest for sp in subparsers.values() for a in sp._actions}
    unknown = sorted(set(values) - dests)
    if unknown:
        raise UsageError(f"{known.config}: unknown option(s) {', '.join(unknown)}")
    for sp in subparsers.values():
        own = {a.dest: a for a in sp._actions}
        for key, value in values.items():
            act = own.get(key)
            if act is None:
                continue
            if act.nargs == 0:
                # store_true flag
                sp.set_defaults(**{key: value.lower() in ("1", "true", "yes", "on")})
            else:
                sp.set_defaults(**{key: value})


def _default_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        if getattr(args, "seed", 0) is None:
            args.seed = _default_seed()
        for name in ("n", "workers", "steps"):
            if getattr(args, name, 1) < 1:
                raise UsageError(f"--{name} must be positive")
        if args.command == "reallocate" and not args.output:
            raise UsageError("reallocate requires -o/--output")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        args.func(args)
    except (ModbalError, ValueError, KeyError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
