"""Command-line interface: one subcommand per pipeline stage.

Every subcommand accepts ``--config FILE``, a JSON object whose keys are
the subcommand's option names (dashes or underscores); flags given on the
command line override it. Failures print a single JSON line on stderr,
``{"error": <kind>, "exit_code": <n>, "message": ...}``, and exit with

    1  any other failure
    2  usage error (unknown flag, bad option value)
    3  missing input file
    4  input or config file that does not match its documented format
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .align import NULL, TranslationTable, train_ibm1
from .evaluation.experiment import MODES, ExperimentConfig, run_experiment
from .evaluation.metrics import bleu, evaluate_retrieval, read_judgments
from .evaluation.synthetic import WorldConfig, gen_synthetic, write_world
from .mine import ConstraintTable, build_constraint_table, query_constraint_set, read_clicklog, read_documents
from .nmt import FORMAT_VERSION, DecodeConfig, ParallelCorpus, TrainConfig, beam_search, train
from .nmt.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .retrieval import INDEX_FORMAT, InvertedIndex, build_index, search
from .textproc import BpeModel, Vocabulary, apply_bpe, build_vocab, learn_bpe, load_bpe, read_bitext, save_bpe, \
    strip_bpe, tokenize

EXIT_OTHER, EXIT_USAGE, EXIT_MISSING, EXIT_SCHEMA = 1, 2, 3, 4

log = logging.getLogger("constraint_qt")


class CliError(Exception):
    kind = "error"
    exit_code = EXIT_OTHER


class UsageError(CliError):
    kind = "usage"
    exit_code = EXIT_USAGE


class MissingFile(CliError):
    kind = "missing_file"
    exit_code = EXIT_MISSING


class SchemaError(CliError):
    kind = "schema_mismatch"
    exit_code = EXIT_SCHEMA


class _Formatter(argparse.HelpFormatter):
    """Show the default of every optional flag, with or without help text."""

    def _get_help_string(self, action):
        text = action.help or ""
        if not action.option_strings or action.required or action.default is argparse.SUPPRESS:
            return text
        if "%(default)" in text:
            return text
        return f"{text} (default: %(default)s)".strip()


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# Options naming files that must exist before a stage starts.
INPUT_OPTIONS = ("input", "bitext", "codes", "ttable", "clicklog", "docs", "constraints", "model", "index",
                 "queries", "hyp", "ref", "run", "judgments", "config")


def _read(path, reader, *args):
    """Run a file reader, mapping format problems to SchemaError."""
    try:
        return reader(path, *args)
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise SchemaError(f"{path}: {exc}") from exc


def _read_lines(path) -> list[tuple[str, list[str]]]:
    """Lines of a ``id<TAB>text[<TAB>...]`` file; plain lines get ids 1, 2, ..."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            out.append((parts[0], parts[1:]) if len(parts) > 1 else (str(lineno), parts))
    return out


def _write(path, lines) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")


# ---------------------------------------------------------------------------
# Stage commands
# ---------------------------------------------------------------------------


def cmd_bpe_learn(a):
    corpus = []
    with open(a.input, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if a.column >= len(parts):
                raise SchemaError(f"{a.input}:{lineno}: no column {a.column}")
            corpus.append(tokenize(parts[a.column]))
    save_bpe(learn_bpe(corpus, a.merges), a.output)


def cmd_bpe_apply(a):
    model = _read(a.codes, load_bpe)
    lines = []
    with open(a.input, encoding="utf-8") as fh:
        for line in fh:
            lines.append(" ".join(apply_bpe(model, tokenize(line.rstrip("\n"))).tokens))
    _write(a.output, lines)


def cmd_align(a):
    bitext = _read(a.bitext, read_bitext)
    train_ibm1(bitext, a.iterations).save(a.output)


def cmd_mine(a):
    table = _read(a.ttable, TranslationTable.load)
    clicklog = _read(a.clicklog, read_clicklog)
    docs = _read(a.docs, read_documents)
    words = sorted(x for x in table.sources() if x != NULL)
    built = build_constraint_table(words, table, clicklog, docs, a.m, a.k_max, a.p_min,
                                   keep_unclicked=a.keep_unclicked)
    built.save(a.output)


def cmd_train(a):
    pairs = _read(a.bitext, read_bitext)
    src_bpe = _read(a.src_bpe, load_bpe) if a.src_bpe else None
    tgt_bpe = _read(a.tgt_bpe, load_bpe) if a.tgt_bpe else None
    src_side = [apply_bpe(src_bpe, s) if src_bpe else s for s, _ in pairs]
    tgt_side = [apply_bpe(tgt_bpe, t) if tgt_bpe else t for _, t in pairs]
    corpus = ParallelCorpus(pairs, build_vocab(src_side, a.vocab_size), build_vocab(tgt_side, a.vocab_size),
                            src_bpe, tgt_bpe)
    table = _read(a.constraints, ConstraintTable.load) if a.constraints else None
    if a.constraint_in_training and table is None:
        raise UsageError("--constraint-in-training needs --constraints")
    cfg = TrainConfig(**{f.name: getattr(a, f.name) for f in fields(TrainConfig)})
    result = train(cfg, corpus, table)
    save_checkpoint(a.output, result.params, {
        "src_vocab": corpus.src_vocab.words(),
        "tgt_vocab": corpus.tgt_vocab.words(),
        "src_bpe": [list(p) for p in src_bpe.merges] if src_bpe else None,
        "tgt_bpe": [list(p) for p in tgt_bpe.merges] if tgt_bpe else None,
        "train": asdict(cfg),
        "steps": len(result.loss_history),
    })
    if a.loss_log:
        _write(a.loss_log, [repr(x) for x in result.loss_history])


def _load_model(path):
    try:
        params, meta = load_checkpoint(path)
        corpus = ParallelCorpus(
            [], Vocabulary(meta["src_vocab"]), Vocabulary(meta["tgt_vocab"]),
            BpeModel(tuple(map(tuple, meta["src_bpe"]))) if meta.get("src_bpe") else None,
            BpeModel(tuple(map(tuple, meta["tgt_bpe"]))) if meta.get("tgt_bpe") else None,
        )
    except (CheckpointError, KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    return params, corpus


def cmd_translate(a):
    params, corpus = _load_model(a.model)
    table = None
    if a.constraints and not a.no_constraint:
        table = _read(a.constraints, ConstraintTable.load)
    decode = DecodeConfig(a.beam_size, a.length_penalty, a.max_len, table is not None)
    lines = []
    for qid, cols in _read_lines(a.input):
        query = tokenize(cols[0], "src")
        src = corpus.src_ids(query)
        if not src:
            lines.append(f"{qid}\t")
            continue
        mask = query_constraint_set(table, query, corpus.tgt_vocab, corpus.tgt_bpe, a.include_unk) if table else None
        hyp = beam_search(params, np.array(src), decode, mask)
        tokens = corpus.tgt_vocab.decode(hyp.tokens)
        if corpus.tgt_bpe is not None:
            tokens = strip_bpe(tokens)
        lines.append(f"{qid}\t{' '.join(tokens)}")
    _write(a.output, lines)


def cmd_index(a):
    docs = _read(a.docs, read_documents)
    build_index(docs, a.k1, a.b).save(a.output)


def cmd_retrieve(a):
    index = _read(a.index, InvertedIndex.load)
    if (a.query is None) == (a.queries is None):
        raise UsageError("give exactly one of --query and --queries")
    if a.query is not None:
        for rank, (doc_id, score) in enumerate(search(index, tokenize(a.query, "tgt"), a.k), 1):
            print(f"{rank}\t{doc_id}\t{score!r}")
        return
    lines = []
    for qid, cols in _read_lines(a.queries):
        for rank, (doc_id, score) in enumerate(search(index, tokenize(cols[0], "tgt"), a.k), 1):
            lines.append(f"{qid}\t{rank}\t{doc_id}\t{score!r}")
    _write(a.output, lines)


def cmd_eval_bleu(a):
    hyps = {qid: tokenize(cols[0] if cols else "").tokens for qid, cols in _read_lines(a.hyp)}
    refs = {qid: tokenize(cols[-1]).tokens for qid, cols in _read_lines(a.ref)}
    missing = sorted(set(refs) - set(hyps))
    if missing:
        raise SchemaError(f"{a.hyp}: no hypothesis for {missing[:5]}")
    ids = sorted(refs)
    print(f"bleu\t{bleu([hyps[i] for i in ids], [refs[i] for i in ids]):.2f}")


def _read_run(path) -> dict[str, list[str]]:
    run: dict[str, list[tuple[int, str]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if parts == [""]:
                continue
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected query_id<TAB>rank<TAB>doc_id<TAB>score")
            run.setdefault(parts[0], []).append((int(parts[1]), parts[2]))
    return {q: [d for _, d in sorted(v)] for q, v in run.items()}


def cmd_eval_retrieval(a):
    run = _read(a.run, _read_run)
    judgments = _read(a.judgments, read_judgments)
    try:
        scores = evaluate_retrieval(run, judgments, a.k)
    except KeyError as exc:
        raise SchemaError(f"{a.run}: {exc}") from exc
    print(json.dumps(scores, sort_keys=True))


def cmd_gen_synthetic(a):
    try:
        cfg = WorldConfig.from_dict(a.world or {})
        world = gen_synthetic(cfg, a.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    write_world(world, a.workdir)


EXPERIMENT_KEYS = tuple(f.name for f in fields(ExperimentConfig))


def cmd_experiment(a):
    d = {k: getattr(a, k) for k in EXPERIMENT_KEYS if getattr(a, k) is not None}
    try:
        cfg = ExperimentConfig.from_dict(d)
    except (ValueError, TypeError) as exc:
        raise SchemaError(f"experiment config: {exc}") from exc
    report = run_experiment(cfg)
    sys.stdout.write(report.to_text())
    if report.failed:
        raise CliError("experiment finished with failed rows (see report)")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _json_arg(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise argparse.ArgumentTypeError(f"not JSON: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    fmt = _Formatter
    parser = _Parser(prog="constraint-qt", description="Constraint-aware query translation pipeline.",
                     formatter_class=fmt)
    parser.add_argument("--version", action="version",
                        version=f"constraint-qt {__version__} (checkpoint format {FORMAT_VERSION}, "
                                f"index format {INDEX_FORMAT})")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        p.add_argument("--config", help="JSON file of option values; flags override it")
        p.set_defaults(func=func)
        return p

    p = command("bpe-learn", cmd_bpe_learn, "Learn BPE merges from a text or TSV file.")
    p.add_argument("--input", required=True, help="one sentence per line, or TSV with --column")
    p.add_argument("--column", type=int, default=0, help="TSV column holding the text")
    p.add_argument("--merges", type=int, default=1000, help="number of merge operations")
    p.add_argument("--output", required=True, help="merges file, one 'a b' pair per line")

    p = command("bpe-apply", cmd_bpe_apply, "Segment a text file with learned merges.")
    p.add_argument("--codes", required=True, help="merges file written by bpe-learn")
    p.add_argument("--input", required=True, help="plain text, one sentence per line")
    p.add_argument("--output", required=True, help="segmented text, subwords joined by spaces")

    p = command("align", cmd_align, "Train IBM Model 1 on a bitext and write the translation table.")
    p.add_argument("--bitext", required=True, help="TSV source<TAB>target")
    p.add_argument("--iterations", type=int, default=10, help="EM iterations")
    p.add_argument("--output", required=True, help="TSV source<TAB>target<TAB>probability")

    p = command("mine", cmd_mine, "Build the constraint table from alignments and clicks.")
    p.add_argument("--ttable", required=True, help="translation table written by align")
    p.add_argument("--clicklog", required=True, help='JSONL {"query": str, "clicked": [doc_id]}')
    p.add_argument("--docs", required=True, help='JSONL {"doc_id": str, "text": str}')
    p.add_argument("--m", type=int, default=10, help="candidates kept per source word")
    p.add_argument("--k-max", type=int, default=50, help="alignment candidates considered per word")
    p.add_argument("--p-min", type=float, default=0.01, help="minimum translation probability")
    p.add_argument("--keep-unclicked", action=argparse.BooleanOptionalAction, default=True,
                   help="keep candidates no clicked document contains, at the tail of the row")
    p.add_argument("--output", required=True, help="TSV source<TAB>rank<TAB>target<TAB>score")

    p = command("train", cmd_train, "Train the translation model.")
    p.add_argument("--bitext", required=True, help="TSV source<TAB>target")
    p.add_argument("--output", required=True, help="checkpoint file")
    p.add_argument("--constraints", help="constraint table used for candidate smoothing")
    p.add_argument("--src-bpe", help="source merges file")
    p.add_argument("--tgt-bpe", help="target merges file")
    p.add_argument("--vocab-size", type=int, default=30000)
    p.add_argument("--loss-log", help="write the loss of every step here")
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        value = getattr(defaults, f.name)
        if isinstance(value, bool):
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=value)
        elif f.name == "checkpoint_dir":
            p.add_argument(flag, dest=f.name, default=value)
        else:
            p.add_argument(flag, dest=f.name, type=type(value), default=value)

    p = command("translate", cmd_translate, "Translate queries with beam search.")
    p.add_argument("--model", required=True, help="checkpoint written by train")
    p.add_argument("--input", required=True, help="TSV id<TAB>query (extra columns ignored) or plain lines")
    p.add_argument("--output", required=True, help="TSV id<TAB>translation")
    p.add_argument("--constraints", help="restrict each query's output to its candidates")
    p.add_argument("--no-constraint", action="store_true", help="ignore --constraints (baseline decoding)")
    p.add_argument("--include-unk", action="store_true", help="allow <unk> inside the constraint mask")
    p.add_argument("--beam-size", type=int, default=4)
    p.add_argument("--length-penalty", type=float, default=0.6)
    p.add_argument("--max-len", type=int, default=20)

    p = command("index", cmd_index, "Build the BM25 index of a document collection.")
    p.add_argument("--docs", required=True, help='JSONL {"doc_id": str, "text": str}')
    p.add_argument("--k1", type=float, default=1.2)
    p.add_argument("--b", type=float, default=0.75)
    p.add_argument("--output", required=True, help="JSON index file")

    p = command("retrieve", cmd_retrieve, "Search the index; prints rank<TAB>doc_id<TAB>score.")
    p.add_argument("--index", required=True, help="index JSON written by index")
    p.add_argument("--query", help="a single query string")
    p.add_argument("--queries", help="TSV id<TAB>query; results go to --output")
    p.add_argument("--output", help="TSV query_id<TAB>rank<TAB>doc_id<TAB>score")
    p.add_argument("--k", type=int, default=10)

    p = command("eval-bleu", cmd_eval_bleu, "Corpus BLEU of translations against references.")
    p.add_argument("--hyp", required=True, help="TSV id<TAB>translation")
    p.add_argument("--ref", required=True, help="TSV id<TAB>...<TAB>reference (last column)")

    p = command("eval-retrieval", cmd_eval_retrieval, "Recall@k, MAP and NDCG@10 of a run file.")
    p.add_argument("--run", required=True, help="TSV query_id<TAB>rank<TAB>doc_id<TAB>score")
    p.add_argument("--judgments", required=True, help="TSV query_id<TAB>doc_id<TAB>grade")
    p.add_argument("--k", type=int, default=10)

    p = command("gen-synthetic", cmd_gen_synthetic, "Write a planted synthetic world.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workdir", required=True, help="directory for the world files")
    p.add_argument("--world", type=_json_arg, help="JSON object of world settings")

    p = command("experiment", cmd_experiment, "Run the full ablation grid and write the report.")
    p.add_argument("--seed", type=int)
    p.add_argument("--workdir")
    p.add_argument("--m-values", type=int, nargs="+")
    p.add_argument("--modes", nargs="+", choices=MODES)
    p.add_argument("--k-max", type=int)
    p.add_argument("--p-min", type=float)
    p.add_argument("--recall-k", type=int)
    p.add_argument("--retrieval-depth", type=int)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--bpe-merges", type=int)
    p.add_argument("--include-unk", action="store_true", default=None)
    p.add_argument("--align-iterations", type=int)
    for key in ("world", "train", "decode"):
        p.add_argument(f"--{key}", type=_json_arg, help=f"JSON object of {key} settings")

    for p in sub.choices.values():
        for action in p._actions:
            if action.help is None:
                action.help = action.dest.replace("_", " ")
    return parser


def _config_path(argv: list[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _parse(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse ``argv`` after installing the values of its ``--config`` file as defaults."""
    path = _config_path(argv)
    command = next((t for t in argv if not t.startswith("-")), None)
    choices = parser._subparsers._group_actions[0].choices
    if path is None or command not in choices:
        return parser.parse_args(argv)
    if not Path(path).is_file():
        raise MissingFile(f"config file not found: {path}")
    try:
        values = json.loads(Path(path).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    if not isinstance(values, dict):
        raise SchemaError(f"{path}: expected a JSON object")
    sub = choices[command]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config", "func")}
    values = {k.replace("-", "_"): v for k, v in values.items()}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise SchemaError(f"{path}: unknown keys {unknown}")
    for key, value in values.items():
        action = actions[key]
        action.required = False
        if action.type is not None and action.type is not _json_arg and value is not None:
            try:
                value = [action.type(v) for v in value] if isinstance(value, list) else action.type(value)
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{path}: {key}: {exc}") from exc
        values[key] = value
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _parse(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        for name in INPUT_OPTIONS:
            value = getattr(args, name, None)
            if value and name != "config" and not Path(value).is_file():
                raise MissingFile(f"--{name} file not found: {value}")
        args.func(args)
    except CliError as exc:
        return _fail(exc.kind, exc.exit_code, str(exc))
    except FileNotFoundError as exc:
        return _fail("missing_file", EXIT_MISSING, str(exc))
    except CheckpointError as exc:
        return _fail("schema_mismatch", EXIT_SCHEMA, str(exc))
    except Exception as exc:  # noqa: BLE001 - reported as one line
        log.debug("unhandled error", exc_info=True)
        return _fail("error", EXIT_OTHER, f"{type(exc).__name__}: {exc}")
    return 0


def _fail(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": message}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
