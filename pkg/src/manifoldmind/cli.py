"""Command-line interface: ingest, train, evaluate, recommend, explain, ablate, synth.

Exit codes: 0 success, 1 runtime failure, 2 validation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from . import data as D
from . import training as T
from .evaluation import evaluate
from .paths import PathScorer
from .pipeline import Prepared, prepare
from .spheres import KERNEL_VARIANTS, init_model, load_checkpoint, save_checkpoint

_log = logging.getLogger("manifoldmind")

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2


class ValidationError(Exception):
    """Bad configuration or inputs; maps to exit code 2."""


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    if text is None or str(text).lower() == "none":
        return None
    return float(text)


def _opt_str(text):
    return None if text is None else str(text)


@dataclass(frozen=True)
class Field:
    key: str
    flag: str
    kind: Callable[[Any], Any]
    default: Any
    help: str
    choices: tuple | None = None


_TRAIN = T.TrainConfig()

FIELDS = (
    Field("data.interactions", "--interactions", _opt_str, None, "interactions TSV (user, item, timestamp[, rating])"),
    Field("data.item_tags", "--item-tags", _opt_str, None, "item-tags TSV (item, tag)"),
    Field("data.delimiter", "--delimiter", str, "\t", "column delimiter"),
    Field("data.header", "--header", _bool, False, "input files start with a header row"),
    Field("data.min_rating", "--min-rating", _opt_float, None, "drop rows whose rating column is below this"),
    Field("data.min_tag_items", "--min-tag-items", int, 2, "drop tags attached to fewer items"),
    Field("split.train", "--split-train", float, 0.8, "train fraction"),
    Field("split.val", "--split-val", float, 0.1, "validation fraction"),
    Field("split.test", "--split-test", float, 0.1, "test fraction"),
    Field("graph.cooccur_threshold", "--cooccur-threshold", int, 2, "min shared items for a tag-tag edge"),
    Field("eval.n_neg", "--n-neg", int, 100, "negatives per evaluation instance"),
    Field("eval.k", "--k", int, 10, "cutoff for ranking and diversity metrics"),
    Field("eval.ece_mode", "--ece-mode", str, "top1", "calibration pairs", ("top1", "per_candidate")),
    Field("eval.diversity", "--diversity", str, "normalized", "diversity mode", ("normalized", "absolute")),
    Field("train.margin", "--margin", float, _TRAIN.margin, "ranking margin"),
    Field("train.reg_weight", "--reg-weight", float, _TRAIN.reg_weight, "curvature regularizer weight"),
    Field("train.curv_margin", "--curv-margin", float, _TRAIN.curv_margin, "curvature regularizer margin"),
    Field("train.lr", "--lr", float, _TRAIN.lr, "learning rate"),
    Field("train.batch_size", "--batch-size", int, _TRAIN.batch_size, "triples per step"),
    Field("train.dim", "--dim", int, _TRAIN.dim, "embedding dimension"),
    Field("train.patience", "--patience", int, _TRAIN.patience, "early-stopping patience (epochs)"),
    Field("train.max_epochs", "--max-epochs", int, _TRAIN.max_epochs, "epoch limit"),
    Field("train.ablation", "--ablation", str, _TRAIN.ablation, "model variant", T.ABLATIONS),
    Field("train.kernel_variant", "--kernel-variant", str, _TRAIN.kernel_variant, "kernel form", KERNEL_VARIANTS),
    Field("train.check_invariants", "--check-invariants", _bool, False, "assert sphere invariants after every step"),
    Field("beam.width", "--beam-width", int, _TRAIN.beam_width, "beam width b"),
    Field("beam.max_hops", "--max-hops", int, _TRAIN.max_hops, "max tag hops k"),
    Field("synth.users", "--synth-users", int, 200, "synthetic users"),
    Field("synth.items", "--synth-items", int, 300, "synthetic items"),
    Field("synth.tags", "--synth-tags", int, 30, "synthetic tags"),
    Field("synth.depth", "--synth-depth", int, 3, "synthetic tag-tree depth"),
    Field("synth.noise", "--synth-noise", float, 0.1, "synthetic label noise"),
    Field("seed", "--seed", int, 0, "global seed"),
)
FIELD_BY_KEY = {f.key: f for f in FIELDS}
# keys that decide what the data pipeline produces; checkpoints are bound to these
DATA_KEYS = tuple(k for k in FIELD_BY_KEY if k.split(".")[0] in ("data", "split", "graph")
                  and k not in ("data.interactions", "data.item_tags")) + ("eval.n_neg", "seed")


def _dest(f: Field) -> str:
    return f.key.replace(".", "__")


def _fmt_default(v) -> str:
    return repr(v) if isinstance(v, str) else str(v)


def _config_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run options")
    g.add_argument("--config", help="JSON file of flat dotted keys (flags override it)")
    g.add_argument("--threads", type=int, default=None,
                   help="evaluation threads (default: machine parallelism)")
    g.add_argument("--out", help="output directory (default: runs/<timestamp>-<config hash>)")
    g.add_argument("--format", choices=("json", "text"), default="json", help="stdout format (default: json)")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    c = p.add_argument_group("config fields (dotted key: default)")
    for f in FIELDS:
        # defaults stay None so that only explicitly given flags override the file
        c.add_argument(f.flag, dest=_dest(f), type=str, default=None, choices=f.choices,
                       metavar=f.key.upper().replace(".", "_") if not f.choices else None,
                       help=f"{f.help} [{f.key}, default: {_fmt_default(f.default)}]")
    return p


def build_parser() -> argparse.ArgumentParser:
    fields = "\n".join(f"  {f.key:26s} {_fmt_default(f.default)}" for f in FIELDS)
    parser = argparse.ArgumentParser(
        prog="manifoldmind",
        description="Curvature-aware probabilistic sphere recommender with path explanations.",
        epilog=f"config fields and defaults:\n{fields}",
        formatter_class=argparse.RawDescriptionHelpFormatter, allow_abbrev=False,
    )
    parent = _config_parent()
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")
    sub.add_parser("synth", parents=[parent], allow_abbrev=False, help="write a synthetic tag-hierarchy dataset")
    sub.add_parser("ingest", parents=[parent], allow_abbrev=False, help="ingest, split and build the graph; write manifests")
    sub.add_parser("train", parents=[parent], allow_abbrev=False, help="train a model and write a checkpoint")
    ev = sub.add_parser("evaluate", parents=[parent], allow_abbrev=False, help="evaluate a checkpoint on the test split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", choices=("test", "val"), default="test")
    rec = sub.add_parser("recommend", parents=[parent], allow_abbrev=False, help="top-n items for one user")
    rec.add_argument("--checkpoint", required=True)
    rec.add_argument("--user", required=True, help="raw user id")
    rec.add_argument("--topn", type=int, default=10)
    ex = sub.add_parser("explain", parents=[parent], allow_abbrev=False, help="reasoning trace for one user-item pair")
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--user", required=True, help="raw user id")
    ex.add_argument("--item", required=True, help="raw item id")
    sub.add_parser("ablate", parents=[parent], allow_abbrev=False, help="train and evaluate all five variants")
    return parser


# --- configuration -----------------------------------------------------------

def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the ``--config`` file, then explicit flags; all validated."""
    cfg = {f.key: f.default for f in FIELDS}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ValidationError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ValidationError("config file must hold a JSON object of dotted keys")
        unknown = sorted(set(doc) - set(FIELD_BY_KEY))
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(doc)
    for f in FIELDS:
        v = getattr(args, _dest(f), None)
        if v is not None:
            cfg[f.key] = v
    for f in FIELDS:
        try:
            cfg[f.key] = None if cfg[f.key] is None and f.default is None else f.kind(cfg[f.key])
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"bad value for {f.key}: {exc}") from exc
        if f.choices and cfg[f.key] not in f.choices:
            raise ValidationError(f"{f.key} must be one of {', '.join(f.choices)}")
    try:
        train_config(cfg)
        split_spec(cfg)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    for key in ("graph.cooccur_threshold", "eval.n_neg", "eval.k", "data.min_tag_items"):
        if cfg[key] < 1:
            raise ValidationError(f"{key} must be >= 1")
    return cfg


def train_config(cfg: dict, **changes) -> T.TrainConfig:
    t = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("train.")}
    t.update(beam_width=cfg["beam.width"], max_hops=cfg["beam.max_hops"], seed=cfg["seed"])
    t.update(changes)
    return T.TrainConfig(**t)


def split_spec(cfg: dict) -> D.SplitSpec:
    return D.SplitSpec(cfg["split.train"], cfg["split.val"], cfg["split.test"])


def config_hash(cfg: dict, keys=None) -> str:
    keys = keys or [k for k in cfg if not k.startswith("synth.")]
    return D.json_hash({k: cfg[k] for k in keys})


# --- shared steps ------------------------------------------------------------

def _data_paths(cfg: dict) -> tuple[Path, Path]:
    out = []
    for key in ("data.interactions", "data.item_tags"):
        if not cfg[key]:
            raise ValidationError(f"{key} is required (flag --{key.split('.')[1].replace('_', '-')})")
        p = Path(cfg[key])
        if not p.is_file():
            raise ValidationError(f"input file not found: {p}")
        out.append(p)
    return out[0], out[1]


def load_data(cfg: dict) -> tuple[Prepared, str]:
    inter, tags = _data_paths(cfg)
    fmt = D.FormatConfig(cfg["data.delimiter"], cfg["data.header"], cfg["data.min_rating"],
                         cfg["data.min_tag_items"])
    log = D.ingest(inter, tags, fmt)
    prep = prepare(log, cfg["seed"], split_spec(cfg), cfg["graph.cooccur_threshold"], cfg["eval.n_neg"])
    return prep, D.file_hash(inter, tags)


def split_manifest(prep: Prepared, cfg: dict, data_hash: str) -> dict:
    s = prep.splits
    return {
        "data_hash": data_hash,
        "config_hash": config_hash(cfg, DATA_KEYS),
        "ingest": prep.log.report,
        "split": {**s.report, "rows": {"train": len(s.train), "val": len(s.val), "test": len(s.test)}},
        "instances": {"val": len(prep.val), "test": len(prep.test),
                      "short": sum(i.short for i in prep.val + prep.test)},
    }


def out_dir(args, cfg: dict) -> Path:
    if args.out:
        path = Path(args.out)
    else:
        path = Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}-{config_hash(cfg)}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def threads(args) -> int:
    n = args.threads if args.threads is not None else (os.cpu_count() or 1)
    if n < 1:
        raise ValidationError("--threads must be >= 1")
    return n


def _load_model(args, cfg, prep: Prepared, data_hash: str):
    path = Path(args.checkpoint)
    if not path.is_file():
        raise ValidationError(f"checkpoint not found: {path}")
    params, meta = load_checkpoint(path)
    if meta.get("data_hash") != data_hash:
        raise ValidationError(f"checkpoint data hash {meta.get('data_hash')} does not match inputs {data_hash}")
    if meta.get("config_hash") != config_hash(cfg, DATA_KEYS):
        raise ValidationError("checkpoint was trained under a different data/split/seed configuration")
    log = prep.log
    if (params.n_users, params.n_items, params.n_tags) != (log.n_users, log.n_items, log.n_tags):
        raise ValidationError("checkpoint shape does not match the ingested data")
    tc = train_config(cfg, **{k: meta["train"][k] for k in
                              ("ablation", "kernel_variant", "beam_width", "max_hops")})
    return params, T.apply_ablation(tc), meta


def _lookup(names: list[str], raw: str, what: str) -> int:
    try:
        return names.index(raw)
    except ValueError:
        raise ValidationError(f"unknown {what} id {raw!r}") from None


# --- verbs -------------------------------------------------------------------

def cmd_synth(args, cfg) -> dict:
    ds = D.synth_hierarchy(cfg["synth.users"], cfg["synth.items"], cfg["synth.tags"],
                           cfg["synth.depth"], cfg["synth.noise"], cfg["seed"])
    inter, tags = ds.write(out_dir(args, cfg))
    return {"interactions": str(inter), "item_tags": str(tags),
            "rows": len(ds.interactions), "item_tag_pairs": len(ds.item_tags)}


def cmd_ingest(args, cfg) -> dict:
    prep, data_hash = load_data(cfg)
    out = out_dir(args, cfg)
    manifest = split_manifest(prep, cfg, data_hash)
    graph_report = {k: v for k, v in prep.graph.report.items()}
    graph_report["tag_cleaning"] = prep.log.report.get("tag_cleaning")
    write_json(out / "split_manifest.json", manifest)
    write_json(out / "graph_report.json", graph_report)
    return {"split_manifest": manifest, "graph": {k: v for k, v in graph_report.items()
                                                  if k != "zero_tag_user_ids"}}


def _train_one(prep: Prepared, tc: T.TrainConfig, thr: int, on_step=None) -> T.TrainResult:
    params = init_model(prep.log.n_users, prep.log.n_items, prep.log.n_tags, tc.dim, tc.seed)

    def ev(p, g, inst, tags, beam, settings):
        return evaluate(p, g, inst, tags, beam, settings, threads=thr)

    return T.train(params, prep.graph, prep.splits.train, prep.val, prep.item_tags, tc,
                   evaluate_fn=ev, on_step=on_step)


def _checkpoint_extra(tc: T.TrainConfig, data_hash: str) -> dict:
    return {"data_hash": data_hash, "train": tc.to_dict()}


def cmd_train(args, cfg) -> dict:
    prep, data_hash = load_data(cfg)
    out = out_dir(args, cfg)
    tc = train_config(cfg)
    ckpt = out / "checkpoint.json"
    dhash = config_hash(cfg, DATA_KEYS)
    try:
        res = _train_one(prep, tc, threads(args))
    except T.TrainingDiverged as exc:
        if exc.last_good is not None:
            save_checkpoint(out / "checkpoint_last_good.json", exc.last_good, seed=tc.seed,
                            config_hash=dhash, extra=_checkpoint_extra(tc, data_hash))
        raise RuntimeError(f"{exc}; last good checkpoint: {out / 'checkpoint_last_good.json'}") from exc
    save_checkpoint(ckpt, res.params, seed=tc.seed, config_hash=dhash,
                    extra=_checkpoint_extra(tc, data_hash))
    manifest = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "data_hash": data_hash,
        "seed": tc.seed,
        "ablation": tc.ablation,
        "model_hash": res.params.model_hash(),
        "best_epoch": res.best_epoch,
        "best_val_ndcg_at_10": res.best_val_ndcg,
        "stopped_early": res.stopped_early,
        "invariant_violations": res.invariant_violations,
        "history": res.history,
        "checkpoint": str(ckpt),
    }
    write_json(out / "run_manifest.json", manifest)
    write_json(out / "split_manifest.json", split_manifest(prep, cfg, data_hash))
    if tc.check_invariants and res.invariant_violations:
        raise RuntimeError(f"{res.invariant_violations} invariant violations during training")
    return {k: v for k, v in manifest.items() if k != "config"}


def cmd_evaluate(args, cfg) -> dict:
    prep, data_hash = load_data(cfg)
    params, ab, _ = _load_model(args, cfg, prep, data_hash)
    inst = prep.test if args.split == "test" else prep.val
    report = evaluate(params, prep.graph, inst, prep.item_tags, ab.beam, ab.settings,
                      k=cfg["eval.k"], ece_mode=cfg["eval.ece_mode"], threads=threads(args),
                      diversity=cfg["eval.diversity"], config_hash=config_hash(cfg))
    doc = report.to_json()
    write_json(out_dir(args, cfg) / "eval_report.json", doc)
    return doc


def cmd_recommend(args, cfg) -> dict:
    prep, data_hash = load_data(cfg)
    params, ab, _ = _load_model(args, cfg, prep, data_hash)
    log = prep.log
    u = _lookup(log.users, args.user, "user")
    if args.topn < 1:
        raise ValidationError("--topn must be >= 1")
    seen = prep.splits.train_items_by_user().get(u, set())
    cands = [i for i in range(log.n_items) if i not in seen]
    if not cands:
        raise ValidationError(f"user {args.user!r} has no unseen items")
    scorer = PathScorer(params, prep.graph, ab.beam, ab.settings)
    rows = scorer.recommend(u, cands, args.topn)
    return {"user": args.user, "items": [
        {"item": log.items[i], "score": s,
         "tags": [log.tags[t] for t in path.tags] if path else []} for i, s, path in rows]}


def cmd_explain(args, cfg) -> dict:
    prep, data_hash = load_data(cfg)
    params, ab, _ = _load_model(args, cfg, prep, data_hash)
    log = prep.log
    u = _lookup(log.users, args.user, "user")
    i = _lookup(log.items, args.item, "item")
    scorer = PathScorer(params, prep.graph, ab.beam, ab.settings)
    doc = scorer.explain(u, i, params.model_hash()).to_json()
    names = {"user": log.users, "item": log.items, "tag": log.tags}
    for node in doc["path"]:
        node["name"] = names[node["kind"]][node["id"]]
    return doc


def cmd_ablate(args, cfg) -> dict:
    prep, data_hash = load_data(cfg)
    out = out_dir(args, cfg)
    manifest = split_manifest(prep, cfg, data_hash)
    write_json(out / "split_manifest.json", manifest)
    split_hash = D.json_hash(manifest)
    thr = threads(args)
    rows, failed = [], 0
    for mode in T.ABLATIONS:
        tc = train_config(cfg, ablation=mode)
        row = {"variant": T.ABLATION_LABELS[mode], "mode": mode, "split_manifest_hash": split_hash}
        try:
            res = _train_one(prep, tc, thr)
            ab = T.apply_ablation(tc)
            rep = evaluate(res.params, prep.graph, prep.test, prep.item_tags, ab.beam, ab.settings,
                           k=cfg["eval.k"], ece_mode=cfg["eval.ece_mode"], threads=thr,
                           diversity=cfg["eval.diversity"])
            row.update(status="ok", ndcg_at_10=rep.ndcg_at_10, recall_at_10=rep.recall_at_10,
                       ece=rep.ece, diversity_at_10=rep.diversity_at_10, tils_at_10=rep.tils_at_10,
                       best_epoch=res.best_epoch, model_hash=res.params.model_hash())
        except Exception as exc:  # noqa: BLE001 - report and continue with the next variant
            _log.error("variant %s failed: %s", mode, exc)
            row.update(status="failed", error=str(exc))
            failed += 1
        rows.append(row)
    doc = {"rows": rows, "split_manifest_hash": split_hash, "config_hash": config_hash(cfg)}
    write_json(out / "ablation.json", doc)
    (out / "ablation.txt").write_text(ablation_table(rows), encoding="utf-8")
    if failed:
        raise PartialFailure(doc)
    return doc


class PartialFailure(Exception):
    def __init__(self, doc):
        super().__init__("some ablation variants failed")
        self.doc = doc


_COLS = (("NDCG@10", "ndcg_at_10"), ("Recall@10", "recall_at_10"), ("ECE", "ece"),
         ("Div@10", "diversity_at_10"), ("T-ILS@10", "tils_at_10"))


def ablation_table(rows: list[dict]) -> str:
    lines = [f"{'Variant':20s}" + "".join(f"{h:>11s}" for h, _ in _COLS)]
    for r in rows:
        if r["status"] == "ok":
            cells = "".join(f"{r[k]:11.4f}" for _, k in _COLS)
        else:
            cells = f"  failed: {r['error']}"
        lines.append(f"{r['variant']:20s}{cells}")
    return "\n".join(lines) + "\n"


def _text(doc, indent=0) -> str:
    pad = " " * indent
    if isinstance(doc, dict):
        width = max((len(str(k)) for k in doc), default=0)
        out = []
        for k, v in doc.items():
            if isinstance(v, (dict, list)) and v:
                out.append(f"{pad}{k}:")
                out.append(_text(v, indent + 2))
            else:
                out.append(f"{pad}{str(k):{width}s}  {v}")
        return "\n".join(out)
    if isinstance(doc, list):
        out = []
        for v in doc:
            if isinstance(v, dict):
                out.append(f"{pad}-")
                out.append(_text(v, indent + 2))
            else:
                out.append(_text(v, indent) if isinstance(v, list) else f"{pad}- {v}")
        return "\n".join(out)
    return f"{pad}{doc}"


VERBS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "train": cmd_train, "evaluate": cmd_evaluate,
    "recommend": cmd_recommend, "explain": cmd_explain, "ablate": cmd_ablate,
}


def _emit(args, doc) -> None:
    if args.format == "text":
        text = ablation_table(doc["rows"]) if args.verb == "ablate" else _text(doc) + "\n"
        sys.stdout.write(text)
    else:
        sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        doc = VERBS[args.verb](args, cfg)
    except (ValidationError, D.DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except PartialFailure as exc:
        _emit(args, exc.doc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - top-level runtime failure
        _log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    _emit(args, doc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
