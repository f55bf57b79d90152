"""``bam`` command line: synth, train-baseline, align, train-bam, rescore, stats, sample-size, wer.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from collections import Counter
from dataclasses import dataclass, fields, replace

import numpy as np

from .align import (
    BaselineAM, Lexicon, align_transcript, load_transcripts, path_score, save_transcripts, train_baseline, wer,
)
from .core import DataError, iter_corpus, read_corpus
from .gmm import VarmixParams
from .mphone import decode_key
from .pipeline import PipelineError, ReducerConfig, ReducerInvariantError, format_counters, train_bam
from .rescore import HitMatrix, hit_ratio_report, load_nbest, order_hypotheses, score_nbest
from .samplesize import TABLE_ROWS, SampleSizeQuery, format_table, required_n
from .store import ModelStore, write_model
from .synth import SynthSpec, SynthWorld, synth_corpus, write_synth

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

logger = logging.getLogger("bam")


@dataclass(frozen=True)
class RunConfig:
    order: int = 2
    alpha: float = 0.3
    beta: float = 2.2
    nmin: int = 4000
    nmax: int = 256_000
    variance_floor: float = 1e-5
    em_iterations: int = 5
    lam: float = 0.6
    wlm: float = 17.0
    fbo: float = 0.0
    shards: int = 4
    seed: int = 0
    word_boundary: bool = True
    dim: int = 39

    def __post_init__(self):
        if self.order < 0:
            raise ValueError("order must be non-negative")
        if not 1 <= self.nmin <= self.nmax:
            raise ValueError(f"need 1 <= nmin <= nmax (got {self.nmin}, {self.nmax})")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1] (got {self.lam})")
        if self.fbo < 0:
            raise ValueError("fbo must be non-negative")
        if self.wlm <= 0:
            raise ValueError("wlm must be positive")
        if self.shards < 1:
            raise ValueError("shards must be at least 1")

    def reducer(self, dim: int) -> ReducerConfig:
        return ReducerConfig(
            M=self.order,
            D=dim,
            n_min=self.nmin,
            n_max=self.nmax,
            varmix=VarmixParams(self.alpha, self.beta),
            em_iterations=self.em_iterations,
            variance_floor=self.variance_floor,
            seed=self.seed,
        )


_FLAG_FIELDS = {
    "order": "order", "alpha": "alpha", "beta": "beta", "nmin": "nmin", "nmax": "nmax",
    "lambda": "lam", "wlm": "wlm", "fbo": "fbo", "shards": "shards", "seed": "seed",
    "variance_floor": "variance_floor", "em_iterations": "em_iterations", "dim": "dim",
}


def load_config(path) -> RunConfig:
    """Read a ``[bam]`` INI section; keys are the flag names without dashes."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise DataError(f"cannot read config file {path}")
    if "bam" not in parser:
        raise DataError(f"{path}: missing [bam] section")
    sec = parser["bam"]
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for name, raw in sec.items():
        name = name.replace("-", "_")
        if name == "word_boundary":
            values["word_boundary"] = sec.getboolean("word_boundary")
            continue
        if name not in _FLAG_FIELDS:
            raise DataError(f"{path}: unknown setting {name!r}")
        field_name = _FLAG_FIELDS[name]
        conv = int if types[field_name] in ("int", int) else float
        try:
            values[field_name] = conv(raw)
        except ValueError:
            raise DataError(f"{path}: bad value for {name}: {raw!r}") from None
    return RunConfig(**values)


def _add_config_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("model configuration (override --config)")
    g.add_argument("--config", help="INI file with a [bam] section")
    g.add_argument("--order", type=int, help="model order M")
    g.add_argument("--alpha", type=float, help="varmix exponent")
    g.add_argument("--beta", type=float, help="varmix scale")
    g.add_argument("--nmin", type=int, help="minimum frames per M-phone")
    g.add_argument("--nmax", type=int, help="reservoir size / maximum frames per M-phone")
    g.add_argument("--lambda", dest="lam", type=float, help="first-pass AM weight")
    g.add_argument("--wlm", type=float, help="language model weight")
    g.add_argument("--fbo", type=float, help="per-frame back-off cost")
    g.add_argument("--shards", type=int, help="shard count S")
    g.add_argument("--seed", type=int, help="random seed")
    g.add_argument("--variance-floor", type=float)
    g.add_argument("--em-iterations", type=int)
    wb = g.add_mutually_exclusive_group()
    wb.add_argument("--word-boundary", dest="word_boundary", action="store_true", default=None)
    wb.add_argument("--no-word-boundary", dest="word_boundary", action="store_false")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            overrides[f.name] = v
    return replace(cfg, **overrides)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- commands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SynthSpec(
        seed=args.seed,
        lexicon_size=args.lexicon_size,
        context_depth=args.context_depth,
        dim=args.dim,
        nbest=args.nbest,
    )
    world = SynthWorld(spec)
    corpus = synth_corpus(world, args.utterances, args.split)
    paths = write_synth(args.out, world, corpus, prefix=f"{args.split}.")
    for name, path in paths.items():
        print(f"{name}\t{path}")
    return EXIT_OK


def cmd_train_baseline(args) -> int:
    _, corpus = read_corpus(args.corpus)
    lexicon = Lexicon.load(args.lexicon)
    history: list[float] = []
    varmix = VarmixParams(args.alpha, args.beta) if args.mixtures else None
    am = train_baseline(corpus, lexicon, args.iterations, varmix=varmix, history=history)
    am.save(args.out)
    for i, ll in enumerate(history):
        print(f"iteration {i}\tcorpus loglik {ll:.4f}")
    print(f"states\t{len(am)}")
    return EXIT_OK


def cmd_align(args) -> int:
    lexicon = Lexicon.load(args.lexicon)
    am = BaselineAM.load(args.am)
    wb = args.word_boundary
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for utt in iter_corpus(args.corpus):
            _, ali = align_transcript(utt, utt.transcript, lexicon, am, wb)
            rec = {
                "id": utt.id,
                "score": round(path_score(ali), 6),
                "segments": [[str(s.state), s.start_frame, s.end_frame] for s in ali.segments],
            }
            out.write(json.dumps(rec) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_train_bam(args) -> int:
    cfg = _config(args)
    lexicon = Lexicon.load(args.lexicon)
    am = BaselineAM.load(args.am)
    dim = am.dim
    counters: Counter = Counter()
    tables = train_bam(
        iter_corpus(args.corpus), am, lexicon, cfg.reducer(dim), cfg.shards, cfg.word_boundary, args.threads,
        counters=counters,
    )
    write_model(args.out, tables, cfg.order, dim)
    print(format_counters(counters))
    print(f"{'M-phones stored':<29}  {sum(len(t) for t in tables)}")
    return EXIT_OK


def cmd_rescore(args) -> int:
    cfg = _config(args)
    lexicon = Lexicon.load(args.lexicon)
    am = BaselineAM.load(args.am)
    nbests = load_nbest(args.nbest, args.corpus, lexicon, am, cfg.word_boundary)
    hits = None
    errors = Counter()
    tops = []
    out = open(args.out, "w", encoding="utf-8") if args.out else None
    with ModelStore.open(args.model, threads=args.threads) as model:
        if model.M != cfg.order:
            raise DataError(f"model order {model.M} != --order {cfg.order}")
        hits = HitMatrix(model.M)
        for nb in nbests:
            scores, h = score_nbest(nb, model, model.M)
            hits.merge(h)
            ranked = order_hypotheses(scores, cfg.lam, cfg.wlm, cfg.fbo)
            if not ranked:
                continue
            best = ranked[0].entry.hypothesis
            tops.append((nb.utterance_id, best))
            s, d, i, _ = wer(nb.reference, best)
            errors.update(S=s, D=d, I=i, N=len(nb.reference), utts=1)
            if out:
                out.write(json.dumps({"id": nb.utterance_id, "ranking": [h.rank for h in ranked],
                                      "best": list(best)}) + "\n")
    if out:
        out.close()
    if args.best:
        save_transcripts(args.best, tops)
    n = max(errors["N"], 1)
    total = errors["S"] + errors["D"] + errors["I"]
    print(f"utterances {errors['utts']}  words {errors['N']}")
    print(f"WER {100.0 * total / n:.2f}% (S/D/I {100.0 * errors['S'] / n:.2f}/"
          f"{100.0 * errors['D'] / n:.2f}/{100.0 * errors['I'] / n:.2f})")
    if hits.total:
        print(hit_ratio_report(hits))
    return EXIT_OK


def cmd_stats(args) -> int:
    with ModelStore.open(args.model) as model:
        M = model.M
        types = np.zeros((M + 1, M + 1), dtype=np.int64)
        gauss = np.zeros((M + 1, M + 1), dtype=np.int64)
        for key, gmm in model.items():
            l, r = decode_key(key, M).shape
            types[l, r] += 1
            gauss[l, r] += gmm.num_components
    for title, table in (("M-phone types", types), ("Gaussians", gauss)):
        print(f"{title} by (left, right) context size; total {int(table.sum())}")
        print("left, right " + "".join(f"{r:>12d}" for r in range(M + 1)))
        for l in range(M + 1):
            print(f"{l:<12d}" + "".join(f"{int(v):>12d}" for v in table[l]))
        print()
    return EXIT_OK


def cmd_sample_size(args) -> int:
    if args.p is None and args.q is None:
        print(format_table(TABLE_ROWS))
        return EXIT_OK
    if args.p is None or args.q is None:
        raise _UsageError("--p and --q go together")
    print(format_table([(args.p, args.q)]) if not args.bare else required_n(SampleSizeQuery(args.p, args.q)))
    return EXIT_OK


def cmd_wer(args) -> int:
    ref = load_transcripts(args.ref)
    hyp = load_transcripts(args.hyp)
    tot = Counter()
    for uid, words in ref.items():
        if uid not in hyp:
            raise DataError(f"hypothesis file lacks utterance {uid!r}")
        s, d, i, _ = wer(words, hyp[uid])
        tot.update(S=s, D=d, I=i, N=len(words))
    n = max(tot["N"], 1)
    print(f"WER {100.0 * (tot['S'] + tot['D'] + tot['I']) / n:.2f}% "
          f"(S {tot['S']} / D {tot['D']} / I {tot['I']}, {tot['N']} reference words)")
    return EXIT_OK


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bam", description="Back-off acoustic model training and N-best rescoring.")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic corpus, lexicon and N-best lists")
    s.add_argument("--out", required=True)
    s.add_argument("--utterances", type=int, default=200)
    s.add_argument("--split", default="train")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--context-depth", type=int, default=1)
    s.add_argument("--dim", type=int, default=8)
    s.add_argument("--lexicon-size", type=int, default=48)
    s.add_argument("--nbest", type=int, default=10)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train-baseline", help="flat-start Viterbi training of the CI baseline")
    s.add_argument("--corpus", required=True)
    s.add_argument("--lexicon", required=True)
    s.add_argument("--iterations", type=int, default=4)
    s.add_argument("--mixtures", action="store_true", help="finish with varmix-sized GMMs per state")
    s.add_argument("--alpha", type=float, default=0.3)
    s.add_argument("--beta", type=float, default=2.2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_baseline)

    s = sub.add_parser("align", help="Viterbi-align a corpus against its transcripts")
    s.add_argument("--corpus", required=True)
    s.add_argument("--lexicon", required=True)
    s.add_argument("--am", required=True)
    s.add_argument("--out")
    s.add_argument("--word-boundary", action="store_true")
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("train-bam", help="run the training pipeline and write the sharded model")
    s.add_argument("--corpus", required=True)
    s.add_argument("--lexicon", required=True)
    s.add_argument("--am", required=True)
    s.add_argument("--out", required=True)
    _add_config_flags(s)
    s.set_defaults(func=cmd_train_bam)

    s = sub.add_parser("rescore", help="rescore N-best lists with a trained model")
    s.add_argument("--model", required=True)
    s.add_argument("--nbest", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--lexicon", required=True)
    s.add_argument("--am", required=True)
    s.add_argument("--out", help="JSONL rankings")
    s.add_argument("--best", help="top hypotheses as a transcript file (input to 'bam wer')")
    _add_config_flags(s)
    s.set_defaults(func=cmd_rescore)

    s = sub.add_parser("stats", help="M-phone and Gaussian counts by context size")
    s.add_argument("--model", required=True)
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("sample-size", help="samples needed to estimate a Gaussian mean")
    s.add_argument("--p", type=float)
    s.add_argument("--q", type=float)
    s.add_argument("--bare", action="store_true", help="print only n")
    s.set_defaults(func=cmd_sample_size)

    s = sub.add_parser("wer", help="word error rate between two transcript files")
    s.add_argument("--ref", required=True)
    s.add_argument("--hyp", required=True)
    s.set_defaults(func=cmd_wer)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (_UsageError, ValueError) as e:
        if isinstance(e, DataError):
            print(f"bam: data error: {e}", file=sys.stderr)
            return EXIT_DATA
        print(f"bam: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ReducerInvariantError, AssertionError) as e:
        print(f"bam: internal invariant violated: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except (PipelineError, OSError) as e:
        print(f"bam: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
