"""Command-line entry point: ``ebrkit {gen-data,train,eval,index,simulate}``.

Exit codes: 0 success, 1 usage error, 2 invalid input or config, 3 runtime failure.
Every command writes ``manifest.json`` into its output directory.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__

log = logging.getLogger("ebrkit")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- manifests -------------------------------------------------------------------


def _hash(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir: Path, command: str, config: Any, seed: int | None,
                   inputs: dict, outputs: dict, started: str) -> dict:
    """One manifest per command; a rerun with the same config hash is flagged."""
    import torch

    path = out_dir / "manifest.json"
    chash = _hash(config)
    rerun = False
    if path.exists():
        try:
            rerun = json.loads(path.read_text()).get("config_hash") == chash
        except json.JSONDecodeError:
            pass
    if rerun:
        log.warning("%s: rerun with identical config hash %s", command, chash)
    manifest = {
        "command": command,
        "config_hash": chash,
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "started_at": started,
        "ended_at": _now(),
        "rerun": rerun,
        "versions": {"ebrkit": __version__, "numpy": np.__version__, "torch": torch.__version__},
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _read_json(path: str | Path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{p}: invalid JSON ({exc})") from None


# -- commands ----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .synth import GenConfig, generate, save_corpus

    started = _now()
    raw = _read_json(args.config) if args.config else {}
    raw = raw.get("data", raw)
    if args.seed is not None:
        raw = {**raw, "seed": args.seed}
    cfg = GenConfig(**raw)
    out = Path(args.out)
    corpus = generate(cfg)
    paths = save_corpus(corpus, out)
    write_manifest(out, "gen-data", cfg.to_dict(), cfg.seed, {"config": args.config}, paths, started)
    print(f"wrote {len(corpus.members)} members, {len(corpus.items)} items, "
          f"{len(corpus.train_pairs)} train pairs to {out}")
    return EXIT_OK


def _apply_overrides(cfg, args):
    """Fold ablation flags into a RunConfig."""
    loss = cfg.loss
    if args.loss is not None or args.temperature is not None or args.mrl_dims is not None:
        kw = loss.to_dict()
        if args.loss is not None:
            kw["loss_kind"] = args.loss
        if args.temperature is not None:
            kw["temperature"] = args.temperature
        if args.mrl_dims is not None:
            kw["mrl_dims"] = tuple(args.mrl_dims)
            kw["mrl_weights"] = None
        elif kw.get("mrl_dims") is not None:
            kw["mrl_dims"] = tuple(kw["mrl_dims"])
        if kw.get("mrl_weights") is not None:
            kw["mrl_weights"] = tuple(kw["mrl_weights"])
        loss = type(loss)(**kw)
    prompts = cfg.prompts
    for flag, name in (("history_mode", "history_mode"), ("count_mode", "count_mode")):
        if getattr(args, flag) is not None:
            prompts = replace(prompts, **{name: getattr(args, flag)})
    if args.truncate is not None:
        prompts = replace(prompts, truncate_post_tokens=None if args.truncate <= 0 else args.truncate)
    model = cfg.model
    for name in ("arch", "pooling", "last_n", "projection", "projection_dim", "hidden_dim"):
        val = getattr(args, name)
        if val is not None:
            model = replace(model, **{name: val})
    sampler = cfg.sampler
    if args.num_hard is not None:
        sampler = replace(sampler, num_hard=args.num_hard)
    if args.num_easy is not None:
        sampler = replace(sampler, num_easy=args.num_easy if args.num_easy == "all_in_batch" else int(args.num_easy))
    if args.num_uniform is not None:
        sampler = replace(sampler, num_uniform=args.num_uniform)
    train = cfg.train
    for flag in ("epochs", "max_steps", "learning_rate", "checkpoint_every"):
        val = getattr(args, flag)
        if val is not None:
            train = replace(train, **{flag: val})
    if args.seed is not None:
        train = replace(train, seed=args.seed)
        model = replace(model, seed=args.seed)
        sampler = replace(sampler, seed=args.seed)
    return replace(cfg, loss=loss, prompts=prompts, model=model, sampler=sampler, train=train)


def cmd_train(args) -> int:
    from .negatives import build_impression_map
    from .encoder import init_params
    from .pipeline import RunConfig, build_prompt_tables
    from .synth import load_corpus
    from .tokenizer import save_vocab
    from .trainer import fit, save_checkpoint

    started = _now()
    cfg = RunConfig.from_dict(_read_json(args.config)) if args.config else RunConfig()
    cfg = _apply_overrides(cfg, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(args.corpus, with_truth=False)
    tables = build_prompt_tables(corpus, cfg.prompts, cfg.max_vocab)
    save_vocab(tables.vocab, out / "vocab.txt")
    (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    model = init_params(cfg.model.encoder_config(tables.vocab.size, cfg.prompts.max_context))
    ckpt, metrics = out / "checkpoint.bin", out / "metrics.jsonl"
    if not args.resume and metrics.exists():
        metrics.unlink()
    meta = {"run_config": cfg.to_dict(), "config_hash": cfg.config_hash()}
    if cfg.train.epochs == 0 or cfg.train.max_steps == 0:
        save_checkpoint(ckpt, model, None, 0, meta)
        steps = 0
    else:
        res = fit(
            model, corpus.train_pairs, tables, build_impression_map(corpus.engagement_log), cfg.loss,
            cfg.sampler, cfg.train, catalog=sorted(corpus.items) if cfg.sampler.num_uniform else None,
            checkpoint_path=ckpt, metrics_path=metrics, resume=args.resume, stop_after=args.stop_after,
            checkpoint_meta=meta,
        )
        steps = res.steps
    write_manifest(out, "train", cfg.to_dict(), cfg.train.seed,
                   {"config": args.config, "corpus": args.corpus},
                   {"checkpoint": ckpt, "metrics": metrics, "vocab": out / "vocab.txt"}, started)
    print(f"trained {steps} steps; checkpoint {ckpt}")
    return EXIT_OK


def _load_run(checkpoint: str | Path):
    from .pipeline import RunConfig
    from .tokenizer import load_vocab
    from .trainer import load_checkpoint

    ckpt = Path(checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model, meta, _ = load_checkpoint(ckpt)
    if "run_config" not in meta:
        raise ValueError(f"{ckpt}: checkpoint has no run config")
    cfg = RunConfig.from_dict(meta["run_config"])
    vocab = load_vocab(ckpt.parent / "vocab.txt")
    return model, cfg, vocab


def cmd_eval(args) -> int:
    from .evaluation import EvalConfig, RandomRetriever, summary_row, write_per_member_csv, write_summary_csv
    from .pipeline import PromptTables, evaluate_model
    from .prompts import render_member_prompt, render_post_prompt
    from .synth import RankingOracle, load_corpus

    started = _now()
    corpus = load_corpus(args.corpus, with_truth=True)
    ecfg = EvalConfig(sample_size=args.sample_size, n=args.n, k=args.k, seed=args.eval_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = {"corpus": args.corpus, "checkpoint": args.checkpoint}
    if args.retriever == "model":
        if not args.checkpoint:
            raise UsageError("--checkpoint is required with --retriever model")
        model, cfg, vocab = _load_run(args.checkpoint)
        opts = cfg.prompts
        items = {i: render_post_prompt(p, vocab, opts) for i, p in corpus.items.items()}
        tables = PromptTables(
            member_tokens={m: render_member_prompt(f, corpus.history.get(m, ()), vocab, opts.max_context, opts,
                                                   post_cache=items).token_ids
                           for m, f in corpus.members.items() if m in corpus.eval_sessions},
            item_tokens={i: p.token_ids for i, p in items.items()},
            vocab=vocab, options=opts,
        )
        dims = None
        if args.mrl_sweep:
            full = model.config.output_dim
            dims = tuple(sorted({d for d in (cfg.loss.mrl_dims or ()) if d <= full} | {full}))
        result = evaluate_model(model, tables, corpus, ecfg, dims=dims)
        config = {"run": cfg.to_dict(), "eval": ecfg.__dict__, "retriever": "model", "dims": dims}
    else:
        retriever = RankingOracle(corpus.truth) if args.retriever == "oracle" else RandomRetriever(args.random_dim, args.eval_seed)
        result = evaluate_model(None, None, corpus, ecfg, retriever=retriever)
        config = {"eval": ecfg.__dict__, "retriever": args.retriever}
    rows = [summary_row(result.reports[d], d, result.popularity_corr.get(d)) for d in sorted(result.reports)]
    write_summary_csv(rows, out / "summary.csv")
    write_per_member_csv(result.reports, out / "per_member.csv")
    write_manifest(out, "eval", config, args.eval_seed, inputs,
                   {"summary": out / "summary.csv", "per_member": out / "per_member.csv"}, started)
    for r in rows:
        print(f"dim={r['dim']} recall@{r['k']}={r['recall_mean']} popularity_corr={r['popularity_corr']}")
    return EXIT_OK


def cmd_index(args) -> int:
    from .encoder import embed
    from .index import FlatIndex, IndexEntry, ItemAttributes, QueryFilters
    from .prompts import render_member_prompt, render_post_prompt
    from .synth import load_corpus

    started = _now()
    model, cfg, vocab = _load_run(args.checkpoint)
    corpus = load_corpus(args.corpus, with_truth=False)
    opts = cfg.prompts
    ids = sorted(corpus.items)
    vecs = embed(model, [render_post_prompt(corpus.items[i], vocab, opts).token_ids for i in ids])
    index = FlatIndex(model.config.output_dim, capacity=len(ids))
    for item_id, vec in zip(ids, vecs):
        p = corpus.items[item_id]
        index.upsert(IndexEntry(item_id, vec, ItemAttributes(p.author_id, frozenset({p.language}),
                                                            p.trust_approved, p.created_at)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index.save(out / "index.bin")
    outputs = {"index": out / "index.bin"}
    if args.query:
        traces = []
        for member_id in args.query:
            if member_id not in corpus.members:
                raise ValueError(f"unknown member {member_id}")
            m = corpus.members[member_id]
            hist = corpus.history.get(member_id, ())
            q = embed(model, [render_member_prompt(m, hist, vocab, opts.max_context, opts).token_ids])[0]
            filters = QueryFilters(m.understood_languages, m.blocked_authors,
                                   frozenset(h.post.post_id for h in hist), True)
            res = index.knn(q, args.k, filters)
            traces.append({"member_id": member_id, "results": [[i, round(s, 12)] for i, s in res]})
            print(member_id, " ".join(i for i, _ in res))
        with open(out / "queries.jsonl", "w", encoding="utf-8") as f:
            for t in traces:
                f.write(json.dumps(t, sort_keys=True) + "\n")
        outputs["queries"] = out / "queries.jsonl"
    write_manifest(out, "index", {"checkpoint": args.checkpoint, "k": args.k, "query": args.query},
                   cfg.train.seed, {"checkpoint": args.checkpoint, "corpus": args.corpus}, outputs, started)
    print(f"indexed {len(index)} items into {out / 'index.bin'}")
    return EXIT_OK


def _parse_windows(text: str) -> dict[str, float]:
    out = {}
    for part in text.split(","):
        if not part.strip():
            continue
        if "=" not in part:
            raise UsageError(f"--windows expects class=seconds pairs, got {part!r}")
        k, v = part.split("=", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError:
            raise UsageError(f"--windows: bad number {v!r}") from None
    return out


def cmd_simulate(args) -> int:
    from .nearline import run_scenario

    started = _now()
    if args.demo:
        spec = json.loads(resources.files("ebrkit").joinpath("data/demo_scenario.json").read_text())
        base = Path(".")
        src = "demo"
    elif args.scenario:
        spec = _read_json(args.scenario)
        base = Path(args.scenario).parent
        src = args.scenario
    else:
        raise UsageError("give a scenario path or --demo")
    windows = _parse_windows(args.windows) if args.windows else None
    model = vocab = None
    if args.checkpoint:
        model, _, vocab = _load_run(args.checkpoint)
    result = run_scenario(spec, base, windows=windows, model=model, vocab=vocab)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.report.write_csv(out / "freshness.csv")
    result.write_traces(out / "traces.jsonl")
    write_manifest(out, "simulate", {"scenario": spec, "windows": windows, "checkpoint": args.checkpoint},
                   spec.get("seed"), {"scenario": src},
                   {"freshness": out / "freshness.csv", "traces": out / "traces.jsonl"}, started)
    for kind, s in result.report.summary().items():
        if s["count"]:
            print(f"{kind}: n={s['count']} p50={s['p50']:.1f}s p99={s['p99']:.1f}s max={s['max']:.1f}s "
                  f"violations={s['violations']}")
    if result.failures:
        for f in result.failures:
            print(f"EXPECTATION FAILED: {f}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ebrkit", description="Embedding-based retrieval toolkit.")
    p.add_argument("--version", action="version", version=f"ebrkit {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus with latent truth")
    g.add_argument("--config", help="JSON generator config (or run config with a 'data' section)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the dual encoder")
    t.add_argument("--config", help="JSON run config; defaults apply when omitted")
    t.add_argument("--corpus", required=True, help="directory written by gen-data")
    t.add_argument("--out", required=True, help="run directory (checkpoint, metrics, vocab)")
    t.add_argument("--resume", action="store_true", help="continue from the run directory's checkpoint")
    t.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)
    t.add_argument("--loss", choices=("bce", "infonce", "infonce_mrl"))
    t.add_argument("--temperature", type=float)
    t.add_argument("--mrl-dims", type=int, nargs="+")
    t.add_argument("--arch", choices=("bag_mlp", "causal_attention"))
    t.add_argument("--hidden-dim", type=int)
    t.add_argument("--pooling", choices=("mean", "last_n"))
    t.add_argument("--last-n", type=int)
    t.add_argument("--projection", choices=("pre_pool", "post_pool"))
    t.add_argument("--projection-dim", type=int)
    t.add_argument("--num-hard", type=int, help="K hard negatives per anchor")
    t.add_argument("--num-easy", help="J easy negatives per anchor or 'all_in_batch'")
    t.add_argument("--num-uniform", type=int, help="uniform corpus negatives per anchor")
    t.add_argument("--history-mode", choices=("all", "positive_only", "none"))
    t.add_argument("--count-mode", choices=("raw", "quantized", "both"))
    t.add_argument("--truncate", type=int, help="post body token budget; <= 0 disables truncation")
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--learning-rate", "--lr", type=float, dest="learning_rate")
    t.add_argument("--checkpoint-every", type=int, help="write a checkpoint every N steps")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="Recall@k and popularity correlation report")
    e.add_argument("--checkpoint")
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--retriever", choices=("model", "oracle", "random"), default="model")
    e.add_argument("--mrl-sweep", action="store_true", help="one report row per MRL prefix dimension")
    e.add_argument("--n", type=int, default=10)
    e.add_argument("--k", type=int, default=10)
    e.add_argument("--sample-size", type=int)
    e.add_argument("--eval-seed", type=int, default=0)
    e.add_argument("--random-dim", type=int, default=64)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("index", help="embed the catalog into an index snapshot and optionally query it")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--corpus", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--query", nargs="*", metavar="MEMBER_ID")
    x.add_argument("--k", type=int, default=10)
    x.set_defaults(func=cmd_index)

    s = sub.add_parser("simulate", help="replay a nearline scenario and report freshness")
    s.add_argument("scenario", nargs="?")
    s.add_argument("--demo", action="store_true", help="use the bundled demo scenario")
    s.add_argument("--out", required=True)
    s.add_argument("--windows", help="override windows, e.g. item_created=30,member_interaction=600")
    s.add_argument("--checkpoint", help="trained run to embed with (default: untrained encoder)")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ebrkit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, TypeError, KeyError, FileNotFoundError) as exc:
        print(f"ebrkit: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime failure")
        print(f"ebrkit: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
