"""Command line interface: ``adr {embed,train,eval,run} --config PATH``.

Exit codes: 0 success, 1 user or configuration error, 2 provider error,
3 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import adapter as adapter_mod
from . import datasets, evaluation, synthetic, trainer
from .config import RunConfig
from .errors import AdaptedRetrievalError, CheckpointError
from .provider import EmbeddingCache, Embedder, StubProvider
from .utils import atomic_write_bytes, atomic_write_json, sha256_hex

logger = logging.getLogger("adapted_retrieval")

QUERY_CKPT = "query_adapter.json"
CORPUS_CKPT = "corpus_adapter.json"


class Session:
    """Dataset and embedder for one command, built lazily from a RunConfig."""

    def __init__(self, cfg):
        self.cfg = cfg
        self._ds = None
        self._embedder = None

    @property
    def dataset(self):
        if self._ds is None:
            self._ds = load_dataset(self.cfg)
        return self._ds

    @property
    def embedder(self):
        if self._embedder is None:
            self._embedder = make_embedder(self.cfg)
        return self._embedder

    def embeddings(self, partitions=None):
        return trainer.embed_dataset(self.dataset, self.embedder, partitions)

    def close(self):
        if self._embedder is not None:
            self._embedder.close()


def load_dataset(cfg):
    sec = cfg.dataset
    if sec.format == "synthetic":
        syn = sec.synthetic
        ds, _ = synthetic.make_offset_fixture(
            n_train=syn.n_train, n_test=syn.n_test, n_decoys=syn.n_decoys, d=cfg.provider.dimension,
            seed=cfg.sub_seed(syn.seed), offset_scale=syn.offset_scale, tag=syn.tag,
        )
    elif sec.format == "beir":
        ds = datasets.load_beir(cfg.resolve(sec.path), name=sec.name, train_split=sec.train_split)
    else:
        ds = datasets.load_pairs(cfg.resolve(sec.path), name=sec.name)
    if sec.split is not None:
        ds = datasets.split(ds, datasets.SplitSpec(sec.split.train_fraction, cfg.sub_seed(sec.split.seed)))
    return ds


def make_embedder(cfg):
    spec = cfg.provider.spec()
    stub = None
    if spec.kind == "stub":
        s = cfg.provider.stub
        seed = cfg.sub_seed(s.seed)
        if s.mode == "offset":
            stub = StubProvider.with_random_offset(spec.dimension, seed, s.offset_scale, s.tag, s.distribution)
        else:
            stub = StubProvider(spec.dimension, seed, "hashed", s.tag)
    return Embedder(spec, cache=EmbeddingCache(cfg.cache_dir), stub=stub)


# --------------------------------------------------------------------------
# commands


def cmd_embed(cfg, out=print):
    session = Session(cfg)
    try:
        ds = session.dataset
        qv, cv = session.embeddings()
        stats = session.embedder.stats
        summary = {
            "dataset": ds.name,
            "queries": len(qv),
            "corpus": len(cv),
            "texts": len(qv) + len(cv),
            **stats.as_dict(),
            "cache_dir": str(cfg.cache_dir),
        }
        out(json.dumps(summary, sort_keys=True))
        return summary
    finally:
        session.close()


def _write_checkpoint_dir(directory, result, mode):
    directory = Path(directory)
    meta = {**result.training_metadata(), "mode": mode}
    paths = [adapter_mod.save(result.query_params, directory / QUERY_CKPT, {**meta, "role": "query"})]
    if result.corpus_params is not None:
        paths.append(adapter_mod.save(result.corpus_params, directory / CORPUS_CKPT, {**meta, "role": "corpus"}))
    return paths


def cmd_train(cfg, mode=None, out=print, session=None):
    own = session is None
    session = session or Session(cfg)
    try:
        ds = session.dataset
        embeddings = session.embeddings(["train"])
        overrides = {"mode": mode} if mode else {}
        d = session.embedder.dimension
        grid = cfg.train.grid_configs(cfg.seed, d, **overrides)
        out_dir = cfg.out_dir
        if grid is None:
            tcfg = cfg.train.config(cfg.seed, **overrides)
            result = trainer.fit(ds, session.embedder, tcfg, embeddings=embeddings)
            sweep_doc = None
        else:
            sw = trainer.sweep(ds, session.embedder, grid, embeddings=embeddings)
            tcfg, result, sweep_doc = sw.best_config, sw.best, sw.to_dict()
        ckpt_dir = out_dir / "checkpoints" / tcfg.mode
        paths = _write_checkpoint_dir(ckpt_dir, result, tcfg.mode)
        result.report.save(out_dir / f"train_report_{tcfg.mode}.json")
        if sweep_doc is not None:
            atomic_write_json(out_dir / f"sweep_report_{tcfg.mode}.json", sweep_doc)
        r = result.report
        out(
            f"trained {tcfg.mode} h={tcfg.h}: best validation {r.selection_metric}={r.best_metric:.4f} "
            f"at epoch {r.best_epoch} (baseline {r.baseline_metric:.4f}); checkpoint {ckpt_dir}"
        )
        return ckpt_dir, result, paths
    finally:
        if own:
            session.close()


def load_checkpoint_dir(directory):
    directory = Path(directory)
    qpath = directory / QUERY_CKPT
    if not qpath.exists():
        raise CheckpointError(f"missing checkpoint: {qpath}")
    query_params = adapter_mod.load(qpath)
    meta = adapter_mod.load_metadata(qpath)
    cpath = directory / CORPUS_CKPT
    corpus_params = adapter_mod.load(cpath) if cpath.exists() else None
    mode = meta.get("mode") or ("adr_full" if corpus_params is not None else "adr")
    if mode == "adr_full" and corpus_params is None:
        raise CheckpointError(f"adr_full checkpoint {directory} lacks {CORPUS_CKPT}")
    return mode, query_params, corpus_params


def cmd_eval(cfg, checkpoints=(), out=print, session=None):
    own = session is None
    session = session or Session(cfg)
    try:
        ds = session.dataset
        part = cfg.eval.partition
        qv, cv = session.embeddings([part])
        index = trainer.build_index(cv, ds.corpus_ids(part))
        ks = tuple(cfg.eval.ks)
        table = evaluation.MetricsTable(ds.name, ks)
        table.add(evaluation.evaluate_system(ds, index, qv, "baseline", ks=ks, partition=part,
                                             gain=cfg.eval.gain))
        names = {"baseline"}
        for ckpt in checkpoints:
            mode, qp, cp = load_checkpoint_dir(ckpt)
            if qp.d != index.d:
                raise CheckpointError(f"checkpoint {ckpt} has d={qp.d}, embeddings have d={index.d}")
            name = mode if mode not in names else f"{mode}:{Path(ckpt).name}"
            names.add(name)
            table.add(evaluation.evaluate_system(ds, index, qv, mode, qp, cp, ks=ks, partition=part,
                                                 name=name, gain=cfg.eval.gain))
        text = evaluation.render_table(table)
        out_dir = cfg.out_dir
        atomic_write_bytes(out_dir / "report.txt", text.encode("utf-8"))
        atomic_write_json(out_dir / "report.json", evaluation.report_json(table))
        out(text.rstrip("\n"))
        return table
    finally:
        if own:
            session.close()


def _file_hash(path):
    return sha256_hex(Path(path).read_bytes())


def cmd_run(cfg, mode=None, out=print):
    session = Session(cfg)
    try:
        ds = session.dataset
        session.embeddings()
        embed_stats = session.embedder.stats.as_dict()
        ckpt_dir, result, ckpt_paths = cmd_train(cfg, mode=mode, out=out, session=session)
        cmd_eval(cfg, [ckpt_dir], out=out, session=session)
        out_dir = cfg.out_dir
        tcfg = result.report.config
        artifacts = {
            str(p.relative_to(out_dir)): _file_hash(p)
            for p in [*ckpt_paths, out_dir / "report.json", out_dir / "report.txt"]
        }
        manifest = {
            "config_hash": cfg.hash(),
            "dataset_hash": ds.content_hash(),
            "dataset": ds.name,
            "counts": ds.counts(),
            "seeds": {
                "global": cfg.seed,
                "train": tcfg["seed"],
                "split": None if cfg.dataset.split is None else cfg.sub_seed(cfg.dataset.split.seed),
                "stub": cfg.sub_seed(cfg.provider.stub.seed) if cfg.provider.kind == "stub" else None,
            },
            "provider_model": session.embedder.model_name,
            "artifacts": artifacts,
            "reports": [f"train_report_{tcfg['mode']}.json"],
            "embedding": embed_stats,
        }
        atomic_write_json(out_dir / "manifest.json", manifest)
        out(f"manifest written to {out_dir / 'manifest.json'}")
        return manifest
    finally:
        session.close()


# --------------------------------------------------------------------------
# argument handling


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors are user errors (exit 1); 2 is reserved for provider failures
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="adr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, type=Path, help="YAML or JSON run configuration")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--provider", choices=["remote", "stub"], help="override provider.kind")
        p.add_argument("--out", type=Path, help="override eval.out (artifact directory)")
        p.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("embed", help="embed and cache every dataset text"))
    p_train = sub.add_parser("train", help="train adapters and write checkpoints")
    common(p_train)
    p_train.add_argument("--mode", choices=["adr", "adr_full"])
    p_eval = sub.add_parser("eval", help="evaluate baseline and checkpoints with nDCG@k")
    common(p_eval)
    p_eval.add_argument("--checkpoint", action="append", default=[], type=Path,
                        help="checkpoint directory (repeatable)")
    p_run = sub.add_parser("run", help="embed, train and evaluate in one go")
    common(p_run)
    p_run.add_argument("--mode", choices=["adr", "adr_full"])
    return parser


def _apply_overrides(cfg, args):
    if args.seed is not None:
        cfg.seed = args.seed
    if args.provider is not None:
        cfg.provider = dataclasses.replace(cfg.provider, kind=args.provider)
    if args.out is not None:
        cfg.eval = dataclasses.replace(cfg.eval, out=str(args.out.resolve()))
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(RunConfig.load(args.config), args)
        if args.command == "embed":
            cmd_embed(cfg)
        elif args.command == "train":
            cmd_train(cfg, mode=args.mode)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint)
        else:
            cmd_run(cfg, mode=args.mode)
    except AdaptedRetrievalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
