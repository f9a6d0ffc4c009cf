"""Command-line interface: train, score, rank, simulate, eval."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import backend
from .events import QuantizationConfig, load_events, notes_from_records, notes_to_records, quantize_sequence
from .evalrank import ALIGNMENTS, prepare_database, rank_database, roc, summarize, worst_case_rank
from .lattice import forward, start_log_likelihoods, viterbi
from .model import build_target_model
from .params import VARIANTS, ErrorModelParams, apply_variant, default_params
from .simulate import (
    SimulationConfig,
    build_corpus_stats,
    default_corpus_stats,
    generate_database,
    moderate_error_params,
    sample_queries,
    target_events,
)
from .training import TrainingPair, train

log = logging.getLogger("melmatch")


class CliError(Exception):
    pass


# -- I/O helpers ----------------------------------------------------------------


@contextlib.contextmanager
def atomic_write(path, mode="w"):
    """Write to a temporary file next to ``path`` and rename it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def _dump_json(obj, path) -> None:
    with atomic_write(path) as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


def _read_json(path, what: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CliError(f"{what} not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{what} is not valid JSON ({path}): {exc}") from None


def _seed(args) -> int:
    env = os.environ.get("MM_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise CliError(f"MM_SEED must be an integer, got {env!r}") from None
    return args.seed


def _range(text: str) -> tuple[int, int]:
    lo, _, hi = text.partition("-")
    try:
        a, b = int(lo), int(hi or lo)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or N-M, got {text!r}") from None
    if a < 1 or b < a:
        raise argparse.ArgumentTypeError(f"invalid range {text!r}")
    return a, b


def _params(args) -> ErrorModelParams:
    cfg_q = getattr(args, "q", None)
    if getattr(args, "params", None):
        try:
            p = ErrorModelParams.load(args.params)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise CliError(f"bad parameter file {args.params}: {exc}") from None
        for name in ("L", "M", "q"):
            v = getattr(args, name, None)
            if v is not None and v != getattr(p, name):
                raise CliError(f"--{name} {v} conflicts with the parameter file ({getattr(p, name)})")
    else:
        p = default_params(L=args.L or 2, M=args.M or 2, q=cfg_q or 29)
    return apply_variant(p, getattr(args, "variant", "full") or "full")


def _events(path, cfg: QuantizationConfig, what: str):
    try:
        return load_events(path, cfg)
    except FileNotFoundError:
        raise CliError(f"{what} not found: {path}") from None
    except (ValueError, TypeError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(f"bad {what} {path}: {exc}") from None


def _database(path, cfg: QuantizationConfig):
    data = _read_json(path, "database")
    if not isinstance(data, list):
        raise CliError("database must be a JSON array of note arrays")
    out = []
    for i, recs in enumerate(data):
        try:
            notes, symbolic = notes_from_records(recs)
        except ValueError as exc:
            raise CliError(f"database target {i}: {exc}") from None
        out.append(quantize_sequence(notes, cfg, offset_search=not symbolic))
    return out


# -- subcommands ----------------------------------------------------------------


def cmd_train(args) -> int:
    init = _params(args)
    cfg = QuantizationConfig(q=init.q)
    manifest = _read_json(args.manifest, "manifest")
    if not isinstance(manifest, list) or not manifest:
        raise CliError("manifest must be a non-empty JSON array")
    base = Path(args.manifest).parent
    pairs = []
    for k, item in enumerate(manifest):
        if not isinstance(item, dict) or "target" not in item or "query" not in item:
            raise CliError(f"manifest entry {k}: needs 'target' and 'query'")
        start = item.get("start_index", 1)
        if not isinstance(start, int) or start < 1:
            raise CliError(f"manifest entry {k}: start_index must be a positive integer")
        tgt = _events(base / item["target"], cfg, "target")
        qry = _events(base / item["query"], cfg, "query")
        if start > len(tgt):
            raise CliError(f"manifest entry {k}: start_index {start} beyond target length {len(tgt)}")
        pairs.append(TrainingPair(tgt, qry, start))

    def progress(it, params, ll):
        log.info("iteration %d: log-likelihood %.6f", it, ll)

    try:
        report = train(pairs, init, tol=args.tol, max_iter=args.max_iter, floor=args.floor,
                       threads=args.threads, callback=progress)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    _dump_json(report.final_params.to_json_dict(), args.out)
    if args.report:
        _dump_json(report.to_json_dict(), args.report)
    log.info("%s after %d iterations", "converged" if report.converged else "not converged", report.iterations)
    return 0 if report.converged else 2


def cmd_score(args) -> int:
    params = _params(args)
    cfg = QuantizationConfig(q=params.q)
    tgt = _events(args.target, cfg, "target")
    qry = _events(args.query, cfg, "query")
    if not qry:
        raise CliError("query is empty")
    if args.start is not None and not 1 <= args.start <= len(tgt):
        raise CliError(f"--start must be in 1..{len(tgt)}")
    m = build_target_model(tgt, params.L, params.M, args.start or 1)
    out = {}
    if args.viterbi:
        res = viterbi(m, params, qry, all_starts=args.start is None)
        out["log_prob"] = res.log_prob if math.isfinite(res.log_prob) else None
        out["path"] = [
            {"edit": str(s.edit), "transposition": s.transposition, "tempo": s.tempo} for s in res.path
        ]
    elif args.start is None:
        per = start_log_likelihoods(m, params, qry)
        best = float(per.max())
        out["log_likelihood"] = best if math.isfinite(best) else None
        out["best_start"] = int(np.argmax(per)) + 1
        out["per_start"] = [float(v) if math.isfinite(v) else None for v in per]
    else:
        ll = forward(m, params, qry).log_likelihood
        out["log_likelihood"] = ll if math.isfinite(ll) else None
    json.dump(out, sys.stdout)
    sys.stdout.write("\n")
    return 0


def cmd_rank(args) -> int:
    params = _params(args)
    cfg = QuantizationConfig(q=params.q)
    db = _database(args.database, cfg)
    if not db:
        raise CliError("database is empty")
    if args.prune and not args.viterbi:
        raise CliError("--prune requires --viterbi")
    queries = [(str(p), _events(p, cfg, "query")) for p in args.query]
    cms = prepare_database(db, params)
    k = len(db) if args.all_scores else args.k
    lines = []
    for name, qry in queries:
        res = rank_database(params, cms, qry, k=k, method="viterbi" if args.viterbi else "forward",
                            prune=args.prune, alignment=args.alignment, threads=args.threads)
        if res.unscorable:
            log.warning("query %s has zero probability under every target", name)
        for row in res.json_lines():
            if len(queries) > 1 or args.all_scores:
                row = {"query": name, **row}
            lines.append(row)
    text = "".join(json.dumps(r) + "\n" for r in lines)
    if args.out:
        with atomic_write(args.out) as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_simulate(args) -> int:
    seed = _seed(args)
    if args.params:
        gen = _params(args)
    else:
        base = default_params(L=args.L or 2, M=args.M or 2, q=args.q or 29)
        gen = moderate_error_params(base, local_only=args.error == "local")
    cfg = SimulationConfig(
        params=gen,
        rng_seed=seed,
        query_length_range=args.query_len,
        database_size=args.db_size,
        target_length_range=args.target_len,
        cfg=QuantizationConfig(q=gen.q),
    )
    stats = build_corpus_stats(args.corpus, cfg.cfg) if args.corpus else default_corpus_stats(gen.q)
    db = generate_database(stats, cfg)
    if not db and (args.n_queries or args.n_train):
        raise CliError("cannot sample queries from an empty database")
    tgts = [target_events(t, cfg.cfg) for t in db]
    sampled = sample_queries(tgts, gen, args.n_queries + args.n_train, cfg) if db else []

    out = Path(args.out)
    tmp = Path(tempfile.mkdtemp(dir=out.parent if out.parent.exists() else None, prefix=f".{out.name}."))
    try:
        _dump_json([notes_to_records(t, True) for t in db], tmp / "database.json")
        (tmp / "targets").mkdir()
        for i, t in enumerate(db):
            _dump_json(notes_to_records(t, True), tmp / "targets" / f"t{i:05d}.json")
        (tmp / "queries").mkdir()
        truth, manifest = [], []
        for j, (tid, sq) in enumerate(sampled):
            is_train = j >= args.n_queries
            name = f"train{j - args.n_queries:05d}.json" if is_train else f"q{j:05d}.json"
            _dump_json(notes_to_records(sq.raw, False), tmp / "queries" / name)
            rec = {"query": f"queries/{name}", "target_id": tid, "start_index": sq.start_index,
                   "truncated": sq.truncated}
            if is_train:
                manifest.append({"target": f"targets/t{tid:05d}.json", "query": f"queries/{name}",
                                 "start_index": sq.start_index})
            else:
                truth.append(rec)
        _dump_json(truth, tmp / "truth.json")
        _dump_json(manifest, tmp / "train_manifest.json")
        _dump_json(gen.to_json_dict(), tmp / "generating_params.json")
        if out.exists():
            for src in sorted(tmp.rglob("*")):
                dst = out / src.relative_to(tmp)
                if src.is_dir():
                    dst.mkdir(parents=True, exist_ok=True)
                else:
                    dst.parent.mkdir(parents=True, exist_ok=True)
                    os.replace(src, dst)
            shutil.rmtree(tmp)
        else:
            os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    log.info("wrote %d targets and %d queries to %s", len(db), len(sampled), out)
    return 0


def cmd_eval(args) -> int:
    truth = _read_json(args.truth, "truth file")
    if not isinstance(truth, list) or not truth:
        raise CliError("truth must be a non-empty JSON array")
    scores: dict[str, dict[int, float]] = {}
    try:
        with open(args.results) as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                row = json.loads(line)
                s = row["log_likelihood"]
                scores.setdefault(str(row.get("query", "")), {})[int(row["target_id"])] = (
                    -math.inf if s is None else float(s)
                )
    except FileNotFoundError:
        raise CliError(f"results not found: {args.results}") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CliError(f"bad results line {n}: {exc}") from None

    base = Path(args.truth).parent
    resolved = {str(Path(k).resolve()): v for k, v in scores.items() if k}
    ranks, pos, neg, partial = [], [], [], 0
    for rec in truth:
        q = rec["query"]
        per = (
            scores.get(q)
            or resolved.get(str((base / q).resolve()))
            or (scores.get("") if len(truth) == 1 else None)
        )
        if per is None:
            raise CliError(f"no results for query {q}")
        tid = int(rec["target_id"])
        ids = sorted(per)
        vals = np.array([per[i] for i in ids])
        if tid in per:
            ranks.append(worst_case_rank(vals, ids.index(tid)))
            pos.append(per[tid])
            neg.extend(per[i] for i in ids if i != tid)
        else:
            # correct target outside the reported top-k: its rank is at least k+1
            partial += 1
            ranks.append(len(ids) + 1)
            neg.extend(vals)
    metrics = summarize(ranks)
    metrics["ranks"] = ranks
    metrics["ranks_lower_bound"] = partial
    if pos and neg:
        finite = [v for v in pos + neg if math.isfinite(v)]
        lo = min(finite) - 1.0 if finite else -1.0
        curve = roc([max(v, lo) for v in pos], [max(v, lo) for v in neg])
        metrics["roc"] = curve.points()
        metrics["roc_auc"] = curve.auc()
        if args.roc_csv:
            with atomic_write(args.roc_csv) as fh:
                curve.write_csv(fh, log_fpr=True)
    if args.out:
        _dump_json(metrics, args.out)
    else:
        json.dump(metrics, sys.stdout, indent=1)
        sys.stdout.write("\n")
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="melmatch", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--backend", choices=backend.available(), help="kernel backend (default from MELMATCH_BACKEND)")
    sub = p.add_subparsers(dest="command", required=True)

    def model_opts(sp, params_help="parameter JSON (default: starting parameters)"):
        sp.add_argument("--params", help=params_help)
        sp.add_argument("--variant", choices=VARIANTS, default="full")
        sp.add_argument("--L", type=int, default=None, help="max join length")
        sp.add_argument("--M", type=int, default=None, help="max elaboration length")
        sp.add_argument("--q", type=int, default=None, help="number of IOI bins")

    t = sub.add_parser("train", help="Baum-Welch training from a manifest")
    t.add_argument("manifest")
    model_opts(t, "initial parameter JSON")
    t.add_argument("--out", required=True, help="trained parameter JSON")
    t.add_argument("--report", help="training report JSON")
    t.add_argument("--tol", type=float, default=1e-4)
    t.add_argument("--max-iter", type=int, default=100)
    t.add_argument("--floor", type=float, default=1e-6)
    t.add_argument("--threads", type=int, default=1)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("score", help="score one query against one target")
    s.add_argument("target")
    s.add_argument("query")
    model_opts(s)
    s.add_argument("--start", type=int, default=None, help="start alignment (default: best over all)")
    s.add_argument("--viterbi", action="store_true")
    s.set_defaults(func=cmd_score)

    r = sub.add_parser("rank", help="rank database targets for one or more queries")
    r.add_argument("database")
    r.add_argument("query", nargs="+")
    model_opts(r)
    r.add_argument("--k", type=int, default=10)
    r.add_argument("--viterbi", action="store_true")
    r.add_argument("--prune", action="store_true", help="branch-and-bound (needs --viterbi)")
    r.add_argument("--alignment", choices=ALIGNMENTS, default="max")
    r.add_argument("--all-scores", action="store_true", help="emit every target, not just the top k")
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--out", help="JSON lines output (default: stdout)")
    r.set_defaults(func=cmd_rank)

    m = sub.add_parser("simulate", help="synthetic database, queries and truth")
    m.add_argument("--out", required=True, help="output directory")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--db-size", type=int, default=100)
    m.add_argument("--query-len", type=_range, default=(8, 12), help="N or N-M notes")
    m.add_argument("--target-len", type=_range, default=(20, 40), help="N or N-M notes")
    m.add_argument("--n-queries", type=int, default=50)
    m.add_argument("--n-train", type=int, default=0, help="extra queries written to a training manifest")
    m.add_argument("--error", choices=("local", "mixed"), default="mixed",
                   help="error profile when --params is not given")
    m.add_argument("--corpus", nargs="*", help="note files for corpus statistics")
    model_opts(m, "generating parameter JSON")
    m.set_defaults(func=cmd_simulate)

    e = sub.add_parser("eval", help="MRR, ranks and ROC from rank output")
    e.add_argument("results", help="JSON lines from 'rank --all-scores'")
    e.add_argument("truth", help="truth.json from 'simulate'")
    e.add_argument("--out", help="metrics JSON (default: stdout)")
    e.add_argument("--roc-csv", help="ROC points as CSV")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.backend:
        backend.use(args.backend)
    for name in ("threads", "k", "db_size", "n_queries", "n_train", "max_iter"):
        v = getattr(args, name, None)
        if v is not None and v < (1 if name in ("threads", "k", "max_iter") else 0):
            parser.error(f"--{name.replace('_', '-')} out of range: {v}")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"melmatch: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
