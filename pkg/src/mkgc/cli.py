"""Command-line entry point: gen-data, train, eval, predict, report, baseline.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as C
from .baselines import BaselineConfig, evaluate_baseline, train_embedding_baseline
from .evaluation import EvalReport, evaluate, length_svg, write_report
from .inference import constrained_beam_search
from .kgdata import (DataError, SynthSpec, load_dataset_dir, save_manifest, split_statistics, synth_generate,
                     write_synthetic_dir)
from .model import load_model
from .numerics import ContractError
from .training import train
from .vocab import Vocabulary, build_vocab, serialize_query

log = logging.getLogger("mkgc")

RESOLVED = "resolved_config.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _kv(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _stats_table(stats: dict) -> str:
    langs = sorted(stats)
    rows = [("", "") + tuple(langs)]
    for part in ("train", "valid", "test"):
        for field in ("entities", "relations", "triples"):
            rows.append((part, field) + tuple(str(stats[l][part][field]) for l in langs))
    rows.append(("T/E ratio", "") + tuple(f"{stats[l]['te_ratio']:.2f}" for l in langs))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.rjust(w) if i > 1 else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
                     for r in rows) + "\n"


# commands ----------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = SynthSpec(n_entities=args.entities, n_relations=args.relations, n_triples=args.triples,
                     languages=args.languages, pattern=args.pattern, seed=args.seed)
    graphs = synth_generate(spec)
    out = Path(args.out)
    write_synthetic_dir(graphs, out, args.align_pairs, args.seed)
    ratios = tuple(float(x) for x in args.ratios.split(","))
    manifest = out / "split.json"
    if manifest.exists():
        manifest.unlink()
    g, split = load_dataset_dir(out, args.seed, ratios)
    save_manifest(g, split, manifest)
    stats = split_statistics(g, split)
    (out / "stats.json").write_text(json.dumps(stats, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    sys.stdout.write(_stats_table(stats))
    for w in split.warnings:
        sys.stdout.write(f"warning: {w}\n")
    return 0


def _resolve(args, extra: dict | None = None) -> dict:
    overrides = _kv(getattr(args, "set", None))
    for name in ("data_dir", "out_dir", "seed", "epochs"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    for ab in getattr(args, "ablate", None) or []:
        overrides.update(C.ABLATIONS[ab])
    if getattr(args, "score", None):
        overrides["score_variant"] = C.SCORES[args.score]
    overrides.update(extra or {})
    return C.resolve(args.config, overrides)


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED).write_text(C.dump(cfg), encoding="utf-8")
    g, split = load_dataset_dir(cfg["data_dir"], cfg["seed"], C.ratios(cfg))
    vocab = build_vocab([g], cfg["tokenizer"])
    vocab.save(out / "vocab.json")
    tcfg = C.train_config(cfg)
    mcfg = C.model_config(cfg, len(vocab))
    validate = None
    if tcfg.eval_every and any(split.valid.values()):
        ecfg = C.eval_config({**cfg, "eval_split": "valid"})

        def valid_hits(model):
            return evaluate(model, vocab, g, split, ecfg).macro["hits@1"]

        validate = valid_hits

    res = train(g, split, vocab, tcfg, mcfg, out_dir=out, validate=validate)
    last = res.log[-1] if res.log else {}
    sys.stdout.write(f"steps={len(res.log)} final_total={last.get('total', float('nan')):.6f} "
                     f"checkpoint={res.checkpoint}\n")
    if res.aborted:
        sys.stderr.write(f"training aborted: {res.aborted}\n")
        return 2
    return 0


def _checkpoint_config(ckpt: Path, args) -> dict:
    cfg_path = args.config or (ckpt.parent / RESOLVED)
    if not Path(cfg_path).exists():
        raise UsageError(f"no config given and {cfg_path} does not exist")
    args.config = cfg_path
    return _resolve(args)


def _load(ckpt_path: str):
    ckpt = Path(ckpt_path)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model, header, _ = load_model(ckpt)
    vocab = Vocabulary.from_json(header["vocab"])
    return ckpt, model, header, vocab


def cmd_eval(args) -> int:
    ckpt, model, header, vocab = _load(args.checkpoint)
    extra = {}
    for opt, key in (("split", "eval_split"), ("mode", "eval_mode"), ("beam_width", "beam_width"),
                     ("candidates", "candidates")):
        if getattr(args, opt) is not None:
            extra[key] = getattr(args, opt)
    if args.filtered:
        extra["filtered"] = True
    cfg = _checkpoint_config(ckpt, argparse.Namespace(**{**vars(args), "set": args.set}))
    cfg.update({k: C._coerce(k, v) for k, v in extra.items()})
    C.validate(cfg)
    g, split = load_dataset_dir(cfg["data_dir"], cfg["seed"], C.ratios(cfg))
    report = evaluate(model, vocab, g, split, C.eval_config(cfg), checkpoint_id=header["blob_sha256"][:16])
    out = Path(args.out) if args.out else ckpt.parent
    stem = f"eval_{cfg['eval_mode']}_{cfg['eval_split']}"
    write_report(report, out, stem)
    sys.stdout.write(report.table())
    return 0


def cmd_predict(args) -> int:
    ckpt, model, header, vocab = _load(args.checkpoint)
    cfg = _checkpoint_config(ckpt, args)
    g, _ = load_dataset_dir(cfg["data_dir"], cfg["seed"], C.ratios(cfg))
    from .evaluation import CandidateSets

    trie = CandidateSets(g, vocab, "global" if args.lang is None else "language").trie(args.lang)
    beam = max(args.k, args.beam_width)
    query = serialize_query(args.head, args.relation, vocab, model.cfg.max_seq_len)
    res = constrained_beam_search(model, query, trie, vocab.end, beam, args.k)
    for rank, (eid, lp) in enumerate(res.ranked, start=1):
        sys.stdout.write(f"{rank}\t{g.entities[eid]}\t{lp:.6f}\n")
    if res.truncated:
        sys.stdout.write("# fewer completions than requested (max_seq_len reached)\n")
    return 0


def cmd_report(args) -> int:
    data = json.loads(Path(args.eval_json).read_text(encoding="utf-8"))
    report = EvalReport(data["per_language"], data["macro"], data["buckets"], data["config"], data["n_queries"])
    stem = Path(args.eval_json).with_suffix("")
    Path(f"{stem}.txt").write_text(report.table(), encoding="utf-8")
    Path(f"{stem}_lengths.svg").write_text(length_svg(report.buckets), encoding="utf-8")
    sys.stdout.write(report.table())
    return 0


def cmd_baseline(args) -> int:
    cfg = _resolve(args)
    g, split = load_dataset_dir(cfg["data_dir"], cfg["seed"], C.ratios(cfg))
    bcfg = BaselineConfig(dim=args.dim, epochs=args.baseline_epochs, seed=cfg["seed"])
    rows = {}
    for lang in sorted(split.train):
        model = train_embedding_baseline(g, split, args.variant, bcfg, lang=lang)
        test = [t for t in split.part(cfg["eval_split"]).get(lang, []) if t.relation not in g.alignment_relations]
        if test:
            rows[lang] = evaluate_baseline(model, test)
    sys.stdout.write(json.dumps(rows, indent=1, sort_keys=True) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mkgc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic multilingual KG with a closed-world split")
    g.add_argument("--entities", type=int, default=200)
    g.add_argument("--relations", type=int, default=6)
    g.add_argument("--triples", type=int, default=500)
    g.add_argument("--languages", type=int, default=1)
    g.add_argument("--pattern", choices=("random", "compositional"), default="compositional")
    g.add_argument("--align-pairs", type=int, default=0)
    g.add_argument("--ratios", default="0.8,0.1,0.1")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    def common(sp, with_config_required=False):
        sp.add_argument("--config", required=with_config_required)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    t = sub.add_parser("train", help="train the generative completion model")
    common(t)
    t.add_argument("--data-dir", dest="data_dir")
    t.add_argument("--out-dir", dest="out_dir")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--ablate", action="append", choices=sorted(C.ABLATIONS))
    t.add_argument("--score", choices=sorted(C.SCORES))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="Hits@1/3/10 on a split")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("train", "valid", "test"))
    e.add_argument("--mode", choices=("kgc", "alignment"))
    e.add_argument("--beam-width", dest="beam_width", type=int)
    e.add_argument("--candidates", choices=("language", "global"))
    e.add_argument("--filtered", action="store_true")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="top-k tails for one query")
    common(pr)
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--head", required=True, help="head surface form")
    pr.add_argument("--relation", required=True, help="relation surface form")
    pr.add_argument("--lang", help="answer language (default: all entities)")
    pr.add_argument("--k", type=int, default=10)
    pr.add_argument("--beam-width", dest="beam_width", type=int, default=10)
    pr.set_defaults(func=cmd_predict)

    r = sub.add_parser("report", help="re-render the text table and SVG chart from an eval JSON")
    r.add_argument("eval_json")
    r.set_defaults(func=cmd_report)

    b = sub.add_parser("baseline", help="TransE/RotatE/ComplEx embedding baselines per language")
    common(b)
    b.add_argument("--data-dir", dest="data_dir")
    b.add_argument("--variant", choices=("transe", "rotate", "complex"), default="transe")
    b.add_argument("--dim", type=int, default=32)
    b.add_argument("--baseline-epochs", dest="baseline_epochs", type=int, default=200)
    b.set_defaults(func=cmd_baseline)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"mkgc: error: {exc}\n")
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, C.ConfigError) as exc:
        sys.stderr.write(f"mkgc: error: {exc}\n")
        return 1
    except (DataError, ContractError, FileNotFoundError, OSError, RuntimeError, ValueError) as exc:
        sys.stderr.write(f"mkgc: {type(exc).__name__}: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
