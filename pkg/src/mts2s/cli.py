"""Command-line entry point.

    mts2s synth --out DIR
    mts2s train --data DIR --out DIR [--ratio 1:1:1] [--profile paper] [--config FILE] [--set k=v ...]
    mts2s eval --checkpoint CK [CK ...] --data DIR --out DIR [--beam 5]
    mts2s generate --checkpoint CK --features FILE [--id CLIP]
    mts2s split-snli --pairs FILE --out DIR
    mts2s gradcheck

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data as dt
from . import decoding
from . import experiment as ex
from . import metrics as mx
from . import training as tr
from .numerics import ContractError, DimensionError, DomainError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("mts2s")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def _manifest(out: Path, command: str, args, **extra):
    rec = {"command": command, "args": {k: v for k, v in vars(args).items() if k != "func"}}
    rec.update(extra)
    _write_json(out / "manifest.json", rec)


def _overrides(pairs):
    out = {}
    for p in pairs or ():
        if "=" not in p:
            raise UsageError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = tr.parse_value(v.strip())
    return out


def build_config(args) -> tr.TrainConfig:
    """defaults < profile < config file < --set < dedicated flags."""
    d = dict(tr.PROFILES[args.profile]) if args.profile else {}
    if args.config:
        d.update(tr.parse_config_file(args.config))
    d.update(_overrides(args.set))
    for flag in ("ratio", "max_updates", "val_interval", "seed"):
        v = getattr(args, flag, None)
        if v is not None:
            d[flag] = v
    try:
        return tr.TrainConfig.from_dict(d)
    except (TypeError, DomainError) as e:
        raise UsageError(str(e)) from None


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    try:
        cfg = dt.SynthConfig(**{**_overrides(args.set), "seed": args.seed})
    except TypeError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out)
    files = dt.generate_synthetic(cfg, out)
    _manifest(out, "synth", args, files={k: v.name for k, v in files.items()})
    print(f"wrote synthetic corpora to {out}")
    return EXIT_OK


def cmd_train(args):
    cfg = build_config(args)
    prep = ex.prepare_files(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    if args.ensemble_size > 1:
        cks = tr.train_ensemble(cfg, args.ensemble_size, prep.train, log_dir=out)
        names = []
        for i, ck in enumerate(cks):
            names.append(f"best_{i}.ckpt")
            tr.save_checkpoint(ck, out / names[-1])
        scores = [ck.scores for ck in cks]
    else:
        res = tr.train(cfg, prep.train, log_path=out / "train_log.jsonl")
        tr.save_checkpoint(res.best, out / "best.ckpt")
        tr.save_checkpoint(res.final, out / "final.ckpt")
        names = ["best.ckpt", "final.ckpt"]
        scores = {"best_update": res.best.update, "best": res.best.scores, "history": res.history}
    # wall-clock time is logged, not written, so reruns give identical artifacts
    log.info("training took %.1f s", time.time() - t0)
    _manifest(out, "train", args, config=asdict(cfg), checkpoints=names, validation=scores)
    print(json.dumps({"checkpoints": names, "validation": scores if args.ensemble_size > 1 else scores["best"]},
                     sort_keys=True))
    return EXIT_OK


def _load_models(paths):
    cks = [tr.load_checkpoint(p) for p in paths]
    vocabs = {json.dumps(ck.vocab.to_json(), sort_keys=True) for ck in cks}
    if len(vocabs) != 1:
        raise ContractError("checkpoints were trained with different vocabularies")
    return cks, [ck.model() for ck in cks]


def cmd_eval(args):
    paths = list(args.checkpoint or []) + list(args.ensemble or [])
    if not paths:
        raise UsageError("eval needs at least one --checkpoint")
    cks, models = _load_models(paths)
    cfg = cks[0].config
    vocab = cks[0].vocab
    prep = ex.prepare_files(args.data, need_test=True, vocab=vocab)
    refs = prep.test_refs
    hyps = ex.decode_test(models, prep, args.beam, cfg)
    report = ex.score(hyps, refs)
    result = {"checkpoints": [str(p) for p in paths], "beam": args.beam, **report.to_json()}
    for pe, cid, h in zip(result["per_example"], prep.test_ids, hyps):
        pe["id"] = cid
        pe["caption"] = " ".join(vocab.decode(h))
    if args.baseline:
        bcks, bmodels = _load_models(args.baseline)
        bhyps = ex.decode_test(bmodels, prep, args.beam, bcks[0].config)
        brep = ex.score(bhyps, refs)
        result["baseline"] = {"checkpoints": [str(p) for p in args.baseline], "corpus": brep.scores()}
        result["bootstrap"] = [mx.bootstrap_significance(report, brep, m, args.samples, args.seed).to_json()
                               for m in mx.METRICS]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval_report.json", result)
    _manifest(out, "eval", args, corpus=report.scores())
    print(json.dumps(report.scores(), sort_keys=True))
    return EXIT_OK


def cmd_generate(args):
    cks, models = _load_models(args.checkpoint)
    feats = dt.read_features(args.features)
    if not feats:
        raise dt.DataError(f"{args.features}: no clips")
    cid = args.id or next(iter(feats))
    if cid not in feats:
        raise dt.DataError(f"{args.features}: no clip {cid!r}")
    cfg = cks[0].config
    if args.beam <= 1:
        toks = decoding.greedy_decode(models, [feats[cid]], cfg.max_decode_len, cfg.visual_cap)[0]
    else:
        toks = decoding.beam_decode(models, feats[cid], args.beam, cfg.max_decode_len, cfg.visual_cap)[0].output
    print(" ".join(cks[0].vocab.decode(toks)))
    return EXIT_OK


def cmd_split(args):
    pairs = dt.read_pairs(args.pairs)
    res = dt.snli_regroup_split(pairs, args.seed)
    out = Path(args.out)
    dt.write_split(res, out)
    _manifest(out, "split-snli", args, audit=res.audit)
    print(json.dumps(res.audit, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import run_suite
    dtype = {"longdouble": np.longdouble, "float64": np.float64}[args.reference]
    reports = run_suite(seed=args.seed, reference_dtype=dtype)
    ok = True
    summary = {}
    for task, rep in reports.items():
        print(f"{task}: max relative error {rep.max_error:.3e} over {rep.checked} entries "
              f"({'pass' if rep.passed else 'FAIL'})")
        for line in rep.lines():
            print("   " + line)
        ok &= rep.passed
        summary[task] = {"max_error": rep.max_error, "checked": rep.checked, "passed": rep.passed}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "gradcheck.json", summary)
        _manifest(out, "gradcheck", args, passed=ok)
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="mts2s", description="Multi-task attention seq2seq for video captioning.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int, default=None if sp.prog.endswith("train") else 0)
        sp.add_argument("--out", type=Path, required=out_required)

    s = sub.add_parser("synth", help="write synthetic captioning / prediction / entailment corpora")
    common(s)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="synthetic config override")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a single- or multi-task model")
    common(s)
    s.add_argument("--data", type=Path, required=True, help="directory written by `synth`")
    s.add_argument("--profile", choices=sorted(tr.PROFILES))
    s.add_argument("--config", type=Path, help="key = value file")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--ratio", help="mixing ratio captioning:prediction:entailment, e.g. 1:1:1")
    s.add_argument("--max-updates", type=int)
    s.add_argument("--val-interval", type=int)
    s.add_argument("--ensemble-size", type=int, default=1)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score checkpoint(s) on the captioning test split")
    common(s)
    s.add_argument("--checkpoint", nargs="+", type=Path)
    s.add_argument("--ensemble", nargs="+", type=Path, help="more checkpoints to average with")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--beam", type=int, default=5)
    s.add_argument("--baseline", nargs="+", type=Path, help="checkpoint(s) to test against (paired bootstrap)")
    s.add_argument("--samples", type=int, default=100_000)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("generate", help="caption one clip")
    s.add_argument("--checkpoint", nargs="+", type=Path, required=True)
    s.add_argument("--features", type=Path, required=True)
    s.add_argument("--id")
    s.add_argument("--beam", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("split-snli", help="multi-reference premise regrouping split")
    common(s)
    s.add_argument("--pairs", type=Path, required=True, help="premise<TAB>hypothesis file")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("gradcheck", help="finite-difference check of all three losses")
    common(s, out_required=False)
    s.add_argument("--reference", choices=("longdouble", "float64"), default="longdouble",
                   help="precision of the finite-difference loss evaluations")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:       # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"mts2s {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (tr.TrainingDiverged, FloatingPointError) as e:
        print(f"mts2s {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (dt.DataError, tr.CheckpointError, OSError, DimensionError, ContractError, DomainError) as e:
        print(f"mts2s {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
