"""``hstory`` command line: gen-toy, train, generate, evaluate, gradcheck, nn.

Effective settings resolve as defaults < ``--config`` JSON < flags, and
``--dump-config`` prints them instead of running.  Exit status is 0 on
success, 1 on runtime failure and 2 on usage errors.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import dataio, inference, metrics, training
from .decoder import load_params

log = logging.getLogger("hstory")

# flag dest -> config key
_FLAG_KEYS = {
    "epochs": "epochs", "batch": "batch_size", "lr": "learning_rate", "dropout": "dropout_p",
    "seed": "seed", "max_len": "L", "images": "N", "dim": "D", "locations": "M",
    "raw_dim": "D_raw", "vocab_size": "vocab_size", "clip": "grad_clip_norm",
    "beam": "beam", "jobs": "jobs", "stories": "stories", "topics": "topics",
    "corpus": "corpus", "features_dir": "features_dir", "word_emb": "word_emb",
    "sent_emb": "sent_emb", "ckpt": "ckpt", "out": "out",
}

_EXTRA_DEFAULTS = {"beam": 1, "jobs": 1, "stories": 20, "topics": 8, "corpus": None,
                   "features_dir": None, "word_emb": None, "sent_emb": None, "ckpt": None, "out": None}


class UsageError(Exception):
    pass


def resolve_config(args) -> dict:
    base = training.TrainConfig.paper_scale() if args.paper_scale else training.TrainConfig()
    cfg = {**base.to_dict(), **_EXTRA_DEFAULTS}
    if args.config:
        try:
            with open(args.config) as fh:
                overrides = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from None
        unknown = set(overrides) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(overrides)
    for dest, key in _FLAG_KEYS.items():
        val = getattr(args, dest, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "freeze_embeddings", False):
        cfg["freeze_embeddings"] = True
    try:
        train_config(cfg)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None
    if cfg["beam"] < 1 or cfg["jobs"] < 1:
        raise UsageError("--beam and --jobs must be >= 1")
    return cfg


def train_config(cfg: dict) -> training.TrainConfig:
    names = {f.name for f in dataclasses.fields(training.TrainConfig)}
    return training.TrainConfig(**{k: v for k, v in cfg.items() if k in names})


def _need(cfg, *keys):
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _emit(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- commands


def cmd_gen_toy(cfg, args):
    _need(cfg, "out")
    paths = dataio.gen_toy_corpus(
        cfg["out"], seed=cfg["seed"], stories=cfg["stories"], vocab_size=cfg["vocab_size"],
        topics=cfg["topics"], n_images=cfg["N"], locations=cfg["M"], raw_dim=cfg["D_raw"],
        dim=cfg["D"], max_len=cfg["L"])
    print(json.dumps({k: str(v) for k, v in dataclasses.asdict(paths).items()}, indent=2))


def _load_records(cfg, vocab=None, with_features=True):
    return dataio.load_corpus(cfg["corpus"], cfg["features_dir"], max_len=cfg["L"], vocab=vocab,
                              with_features=with_features)


def cmd_train(cfg, args):
    _need(cfg, "corpus", "word_emb", "out")
    words = dataio.load_embeddings(cfg["word_emb"])
    sents = dataio.load_embeddings(cfg["sent_emb"]) if cfg["sent_emb"] else None
    records = _load_records(cfg, vocab=words)
    if not records:
        raise RuntimeError(f"{cfg['corpus']}: corpus is empty")
    result = training.train(records, train_config(cfg), words, sents, out_dir=cfg["out"])
    # the sentence table may have grown; keep its token list next to the checkpoints
    dataio.write_embeddings(Path(cfg["out"]) / "sentences.emb", result.params.sentence_table_view())
    last = result.log[-1] if result.log else None
    print(json.dumps({
        "checkpoint": str(result.checkpoints[-1]),
        "loss_csv": str(Path(cfg["out"]) / "loss.csv"),
        "epochs": len(result.log),
        "final_mean_loss": last.mean_loss if last else None,
        "final_token_accuracy": last.token_accuracy if last else None,
    }))


def cmd_generate(cfg, args):
    _need(cfg, "ckpt", "word_emb", "corpus")
    params = load_params(cfg["ckpt"], cfg["word_emb"])
    records = _load_records(cfg)
    stories = inference.generate_corpus(records, params, beam=cfg["beam"], max_len=cfg["L"],
                                        jobs=cfg["jobs"])
    _emit("".join(json.dumps(s.to_json()) + "\n" for s in stories), cfg["out"])


def _story_tokens(sentences) -> list[str]:
    return [w for s in sentences for w in s]


def cmd_evaluate(cfg, args):
    _need(cfg, "corpus")
    if not args.candidates:
        raise UsageError("missing required option: --candidates")
    refs = {r.story_id: r for r in _load_records(cfg, with_features=False)}
    cands, gold = [], []
    with open(args.candidates, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            rec = refs.get(obj["story_id"])
            if rec is None:
                raise RuntimeError(f"{args.candidates}:{lineno}: story {obj['story_id']!r} not in corpus")
            cands.append(_story_tokens(obj["sentences"]))
            gold.append(_story_tokens(rec.words(i) for i in range(rec.n_images)))
    if not cands:
        raise RuntimeError(f"{args.candidates}: no candidates")
    result = {"bleu": metrics.bleu(cands, gold), "cider": metrics.cider(cands, gold), "items": len(cands)}
    _emit(json.dumps(result) + "\n", cfg["out"])


def cmd_gradcheck(cfg, args):
    record, params = training.gradcheck_setup(cfg["seed"])
    err, rows = training.sampled_gradcheck(record, params, n_samples=args.samples, seed=cfg["seed"])
    print(f"sampled coordinates: {len(rows)}")
    print(f"max relative error: {err:.6e}")
    return 0 if err <= args.tol else 1


def cmd_nn(cfg, args):
    if not args.query:
        raise UsageError("missing required option: --query")
    if args.table == "sentence":
        _need(cfg, "sent_emb")
        table = dataio.load_embeddings(cfg["sent_emb"])
        if cfg["ckpt"]:
            _need(cfg, "word_emb")
            table = load_params(cfg["ckpt"], cfg["word_emb"], cfg["sent_emb"]).sentence_table_view()
    else:
        _need(cfg, "word_emb")
        table = dataio.load_embeddings(cfg["word_emb"])
        if cfg["ckpt"]:
            table = load_params(cfg["ckpt"], cfg["word_emb"]).word_table_view()
    hits = metrics.nearest_neighbors(args.query, table, k=args.k, exclude_query=args.exclude_query)
    width = max(len(t) for t, _ in hits)
    print(f"query: {args.query}")
    for rank, (tok, sim) in enumerate(hits, 1):
        print(f"{rank:>3}  {tok:<{width}}  {sim:+.6f}")


COMMANDS = {
    "gen-toy": cmd_gen_toy, "train": cmd_train, "generate": cmd_generate,
    "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck, "nn": cmd_nn,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("configuration")
    g.add_argument("--config", help="JSON file of config overrides")
    g.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    g.add_argument("--paper-scale", action="store_true",
                   help="full-size defaults (D=768, M=196, |V|=18000)")
    g.add_argument("--seed", type=int)
    g.add_argument("--jobs", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--dropout", type=float)
    g.add_argument("--clip", type=float, help="global gradient-norm clip")
    g.add_argument("--beam", type=int)
    g.add_argument("--max-len", type=int, help="words per sentence L")
    g.add_argument("--images", type=int, help="images per story N")
    g.add_argument("--dim", type=int, help="hidden/embedding size D")
    g.add_argument("--locations", type=int, help="feature locations per image M")
    g.add_argument("--raw-dim", type=int, help="raw feature size D_raw")
    g.add_argument("--vocab-size", type=int)
    g.add_argument("--freeze-embeddings", action="store_true")
    p = common.add_argument_group("paths")
    p.add_argument("--corpus")
    p.add_argument("--features-dir")
    p.add_argument("--word-emb")
    p.add_argument("--sent-emb")
    p.add_argument("--ckpt")
    p.add_argument("--out")

    parser = argparse.ArgumentParser(prog="hstory", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    gt = sub.add_parser("gen-toy", parents=[common], help="write a synthetic corpus")
    gt.add_argument("--stories", type=int)
    gt.add_argument("--topics", type=int)
    sub.add_parser("train", parents=[common], help="train and write checkpoints + loss.csv")
    sub.add_parser("generate", parents=[common], help="decode stories to JSON lines")
    ev = sub.add_parser("evaluate", parents=[common], help="BLEU/CIDEr of generated stories")
    ev.add_argument("--candidates", help="JSON lines written by 'generate'")
    gc = sub.add_parser("gradcheck", parents=[common], help="backprop vs finite differences")
    gc.add_argument("--samples", type=int, default=50)
    gc.add_argument("--tol", type=float, default=1e-4)
    nn = sub.add_parser("nn", parents=[common], help="cosine nearest neighbours")
    nn.add_argument("--query")
    nn.add_argument("--k", type=int, default=5)
    nn.add_argument("--table", choices=("word", "sentence"), default="word")
    nn.add_argument("--exclude-query", action="store_true")
    return parser


def _setup_logging():
    level = os.environ.get("HSTORY_LOG", "error").upper()
    if level not in ("ERROR", "INFO", "DEBUG"):
        level = "ERROR"
    logging.basicConfig(level=getattr(logging, level), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = resolve_config(args)
        if args.dump_config:
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return 0
        rc = COMMANDS[args.command](cfg, args)
    except UsageError as e:
        print(f"hstory {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"hstory {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return rc or 0


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
