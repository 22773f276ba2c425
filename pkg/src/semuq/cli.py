"""``uq`` command-line entry point.

Subcommands: sample, entropy, report, eval, dpo, calibrate-thresholds.  All
inputs and outputs are JSON lines tagged with ``"schema": "uq/v1"``.

Settings resolve as built-in defaults < ``--config`` TOML file < environment
(``UQ_API_BASE``, ``UQ_API_KEY``) < command-line flags.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass
from typing import Any, Iterator, Optional, Sequence, TextIO

import tomli

from . import __version__
from .backends import HTTPBackend, MockBackend
from .clustering import cluster, make_judge
from .dpo import (
    DpoConfig,
    ExternalLabelerScorer,
    PreferencePair,
    ScoredGeneration,
    TokenF1Scorer,
    build_pairs,
    dpo_batch_loss,
    preference_margin,
    score_generation,
)
from .entropy import DEFAULT_ESTIMATOR, EstimatorKind, entropy_report
from .errors import (
    BackendUnavailable,
    DegenerateLabels,
    InvalidConfig,
    LogprobsMissing,
    RemoteJudgeUnavailable,
    ScorerUnavailable,
    UQError,
)
from .evaluation import (
    DEFAULT_N_BOOT,
    AblationGrid,
    EvalRecord,
    ReportItem,
    VQAItem,
    bootstrap_ci,
    run_ablation,
)
from .gateway import DEFAULT_PARALLELISM, sample_generations
from .report import (
    DEFAULT_ANSWERS_PER_PROBE,
    ReliabilityThresholds,
    assess_report,
    calibrate_thresholds,
)
from .types import SCHEMA, ProbeContext, SampleSet, SamplingConfig

logger = logging.getLogger("semuq")

EXIT_OK, EXIT_USAGE, EXIT_BACKEND, EXIT_DEGENERATE = 0, 2, 3, 4


class InputError(InvalidConfig):
    pass


@dataclass
class RunConfig:
    api_base: Optional[str] = None
    model: str = "default"
    temperature: float = 1.0
    top_p: float = 0.9
    max_tokens: int = 256
    m: int = 10
    estimator: str = DEFAULT_ESTIMATOR.value
    judge: str = "binary_rule"
    theta_high: float = 0.25
    theta_low: float = 0.55
    answers_per_probe: int = DEFAULT_ANSWERS_PER_PROBE
    parallelism: int = DEFAULT_PARALLELISM
    seed: int = 0
    beta: float = 0.1
    min_gap: float = 0.0

    def sampling(self, m: Optional[int] = None) -> SamplingConfig:
        return SamplingConfig(self.temperature, self.top_p, self.max_tokens, m if m is not None else self.m)

    def thresholds(self) -> ReliabilityThresholds:
        return ReliabilityThresholds(self.theta_high, self.theta_low)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    fields = set(RunConfig.__dataclass_fields__)
    if getattr(args, "config", None):
        with open(args.config, "rb") as fh:
            data = tomli.load(fh)
        for k, v in data.items():
            if k not in fields:
                raise InvalidConfig(f"unknown config key {k!r} in {args.config}")
            setattr(cfg, k, v)
    if os.environ.get("UQ_API_BASE"):
        cfg.api_base = os.environ["UQ_API_BASE"]
    for k in fields:
        v = getattr(args, k, None)
        if v is not None:
            setattr(cfg, k, v)
    cfg.sampling()  # validates
    if cfg.parallelism < 1:
        raise InvalidConfig("parallelism must be >= 1")
    return cfg


def make_backend(args: argparse.Namespace, cfg: RunConfig) -> Any:
    if getattr(args, "mock_fixture", None):
        return MockBackend.from_file(args.mock_fixture)
    return HTTPBackend(base_url=cfg.api_base, model=cfg.model)


# --- I/O helpers --------------------------------------------------------------


def read_jsonl(path: str) -> Iterator[tuple[int, dict[str, Any]]]:
    fh: TextIO = sys.stdin if path == "-" else open(path, encoding="utf-8")
    try:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except ValueError as e:
                raise InputError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise InputError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj
    finally:
        if fh is not sys.stdin:
            fh.close()


def _at(path: str, lineno: int, fn, *a, **kw):
    """Run ``fn`` and prefix validation errors with the input position."""
    try:
        return fn(*a, **kw)
    except (InvalidConfig, KeyError, TypeError, ValueError) as e:
        if isinstance(e, InputError):
            raise
        raise InputError(f"{path}:{lineno}: {e}") from None


def dumps(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False)


def _int_list(text: str) -> list[int]:
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    return out


def _estimators(text: str) -> list[EstimatorKind]:
    try:
        return [EstimatorKind(x.strip()) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise InvalidConfig(str(e)) from None


# --- subcommands --------------------------------------------------------------


def cmd_sample(args: argparse.Namespace, out: TextIO) -> int:
    cfg = resolve_config(args)
    backend = make_backend(args, cfg)
    config = cfg.sampling()
    seen: set[str] = set()
    for lineno, obj in read_jsonl(args.input):
        ctx = _at(args.input, lineno, ProbeContext.from_dict, obj)
        if ctx.id in seen:
            raise InputError(f"{args.input}:{lineno}: duplicate context id {ctx.id!r}")
        seen.add(ctx.id)
        ss = sample_generations(
            ctx, config, backend, require_logprobs=not args.allow_missing_logprobs, parallelism=cfg.parallelism
        )
        out.write(dumps(ss.to_dict()) + "\n")
    return EXIT_OK


def cmd_entropy(args: argparse.Namespace, out: TextIO) -> int:
    cfg = resolve_config(args)
    judge_kwargs = {"base_url": args.nli_url} if cfg.judge == "remote_nli" else {}
    judge = make_judge(cfg.judge, **judge_kwargs)
    kind = _at("--estimator", 0, EstimatorKind, cfg.estimator)
    for lineno, obj in read_jsonl(args.input):
        ss = _at(args.input, lineno, SampleSet.from_dict, obj)
        cl = cluster(ss, judge, length_normalized=args.length_normalized, merge_duplicates=not args.no_dedup)
        report = entropy_report(cl, ss.context.id)
        if args.all_estimators:
            payload = report.to_dict(bits=args.bits)
            missing = [k.value for k, v in report.values.items() if v is None]
            if missing:
                payload["absent"] = missing
                logger.warning("%s:%d: no log-probabilities; %s absent", args.input, lineno, ", ".join(missing))
        else:
            if report.values.get(kind) is None:
                raise InputError(
                    f"{args.input}:{lineno}: estimator {kind.value} needs token log-probabilities"
                )
            payload = report.to_dict(bits=args.bits, kinds=[kind])
        out.write(dumps(payload) + "\n")
    return EXIT_OK


def _report_item(path: str, lineno: int, obj: dict[str, Any]) -> tuple[str, str, ProbeContext]:
    if not isinstance(obj.get("report"), str) or not obj["report"].strip():
        raise InputError(f"{path}:{lineno}: missing or empty 'report' field")
    report_id = str(obj.get("report_id") or obj.get("id") or f"line{lineno}")
    ctx_d = dict(obj.get("context") or {})
    ctx_d.setdefault("id", report_id)
    ctx_d.setdefault("query", "Generate the radiology report for this image.")
    if "image_ref" in obj and "image_ref" not in ctx_d:
        ctx_d["image_ref"] = obj["image_ref"]
    return report_id, obj["report"], _at(path, lineno, ProbeContext.from_dict, ctx_d)


def cmd_report(args: argparse.Namespace, out: TextIO) -> int:
    cfg = resolve_config(args)
    backend = make_backend(args, cfg)
    ks = _int_list(args.probes_per_sentence)
    if not ks or any(k < 1 for k in ks):
        raise InvalidConfig("--probes-per-sentence needs positive integers")
    if args.thresholds:
        hi, lo = (float(x) for x in args.thresholds.split(","))
        cfg.theta_high, cfg.theta_low = hi, lo
    thresholds = cfg.thresholds()
    kind = EstimatorKind(cfg.estimator)
    if args.text:
        with open(args.input, encoding="utf-8") as fh:
            items = [(1, {"report_id": os.path.basename(args.input), "report": fh.read()})]
    else:
        items = list(read_jsonl(args.input))
    for lineno, obj in items:
        report_id, text, ctx = _report_item(args.input, lineno, obj)
        for k in ks:
            assessment = assess_report(
                text, ctx, k, cfg.sampling(cfg.answers_per_probe), backend,
                thresholds=thresholds, kind=kind, report_id=report_id, parallelism=cfg.parallelism,
            )
            payload = assessment.to_dict()
            payload["estimator"] = kind.value
            out.write(dumps(payload) + "\n")
    return EXIT_OK


def _write_rows(rows: list[dict[str, Any]], fmt: str, out: TextIO) -> None:
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else [], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        out.write(buf.getvalue())
    else:
        out.write(dumps({"schema": SCHEMA, "rows": rows}) + "\n")


def cmd_eval(args: argparse.Namespace, out: TextIO) -> int:
    cfg = resolve_config(args)
    if args.seed is None:
        raise InvalidConfig("--seed is required for reproducible bootstrap intervals")
    lines = list(read_jsonl(args.input))
    if args.ablate is None:
        records = [_at(args.input, n, EvalRecord.from_dict, obj) for n, obj in lines]
        by_kind: dict[EstimatorKind, list[EvalRecord]] = {}
        for r in records:
            by_kind.setdefault(r.estimator, []).append(r)
        rows = []
        for kind in EstimatorKind:
            if kind not in by_kind:
                continue
            ci = bootstrap_ci(by_kind[kind], n_boot=args.boot, seed=args.seed)
            rows.append(
                {"estimator": kind.value, "metric": "auroc", "auroc": ci.point,
                 "ci_lo": ci.lo, "ci_hi": ci.hi, "n": len(by_kind[kind])}
            )
        _write_rows(rows, args.format, out)
        return EXIT_OK

    backend = make_backend(args, cfg)
    estimators = _estimators(args.estimators)
    if args.ablate == "m":
        grid = AblationGrid(m_values=tuple(_int_list(args.grid or "5,10,15,20,30")))
        dataset = []
        for n, obj in lines:
            ctx = _at(args.input, n, ProbeContext.from_dict, obj)
            if not obj.get("reference"):
                raise InputError(f"{args.input}:{n}: missing 'reference'")
            dataset.append(VQAItem(ctx, str(obj["reference"]), obj.get("answer")))
        judge_kwargs = {"base_url": args.nli_url} if cfg.judge == "remote_nli" else {}
        rows_ = run_ablation(
            dataset, grid, estimators, backend, knob="m", judge=make_judge(cfg.judge, **judge_kwargs),
            base_config=cfg.sampling(), n_boot=args.boot, seed=args.seed, parallelism=cfg.parallelism,
        )
    else:
        grid = AblationGrid(probes_values=tuple(_int_list(args.grid or "1-5")))
        dataset = []
        for n, obj in lines:
            _, text, ctx = _report_item(args.input, n, obj)
            errs = obj.get("sentence_errors")
            if not isinstance(errs, list):
                raise InputError(f"{args.input}:{n}: missing 'sentence_errors' list")
            dataset.append(ReportItem(ctx, text, tuple(bool(x) for x in errs)))
        rows_ = run_ablation(
            dataset, grid, estimators, backend, knob="probes", base_config=cfg.sampling(),
            answers_per_probe=cfg.answers_per_probe, n_boot=args.boot, seed=args.seed,
            parallelism=cfg.parallelism,
        )
    _write_rows([r.to_dict() for r in rows_], args.format, out)
    return EXIT_OK


def _make_scorer(args: argparse.Namespace):
    if args.score == "external":
        return ExternalLabelerScorer(base_url=args.labeler_url)
    return TokenF1Scorer()


def cmd_dpo(args: argparse.Namespace, out: TextIO) -> int:
    cfg = resolve_config(args)
    config = DpoConfig(cfg.beta)
    scorer = None
    pairs: list[PreferencePair] = []
    skipped = 0
    for lineno, obj in read_jsonl(args.input):
        if "winner" in obj and "loser" in obj:
            pairs.append(_at(args.input, lineno, PreferencePair.from_dict, obj))
            continue
        if not isinstance(obj.get("candidates"), list):
            raise InputError(f"{args.input}:{lineno}: expected a pair or a 'candidates' list")
        prompt_id = str(obj.get("prompt_id", f"line{lineno}"))
        raw = obj["candidates"]
        if obj.get("reference"):
            scorer = scorer or _make_scorer(args)
            raw = [
                dict(c, score=score_generation(str(c.get("text", "")), obj["reference"], scorer)) for c in raw
            ]
        cands = [_at(args.input, lineno, ScoredGeneration.from_dict, c) for c in raw]
        pair = _at(args.input, lineno, build_pairs, prompt_id, cands, cfg.min_gap)
        if pair is None:
            skipped += 1
            logger.warning("%s:%d: prompt %s has tied scores; no pair emitted", args.input, lineno, prompt_id)
            continue
        pairs.append(pair)
    if not pairs:
        out.write(dumps({"schema": SCHEMA, "type": "summary", "mean_loss": None, "n_pairs": 0, "n_skipped": skipped}) + "\n")
        return EXIT_OK
    batch = dpo_batch_loss(pairs, config)
    for pair, loss, gw, gl in zip(pairs, batch.per_pair, batch.grad_winner, batch.grad_loser):
        payload = {"schema": SCHEMA, "type": "pair", **pair.to_dict()}
        payload.update(loss=loss, margin=preference_margin(pair, config), grad_winner=gw, grad_loser=gl)
        out.write(dumps(payload) + "\n")
    out.write(
        dumps({"schema": SCHEMA, "type": "summary", "beta": config.beta, "mean_loss": batch.mean,
               "n_pairs": len(pairs), "n_skipped": skipped}) + "\n"
    )
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace, out: TextIO) -> int:
    entropies, levels = [], []
    for lineno, obj in read_jsonl(args.input):
        try:
            entropies.append(float(obj["entropy"]))
            levels.append(str(obj["level"]))
        except (KeyError, TypeError, ValueError) as e:
            raise InputError(f"{args.input}:{lineno}: need numeric 'entropy' and 'level' ({e})") from None
    th, score = _at(args.input, 0, calibrate_thresholds, entropies, levels)
    out.write(
        dumps({"schema": SCHEMA, "theta_high": th.theta_high, "theta_low": th.theta_low,
               "balanced_accuracy": score, "n": len(entropies)}) + "\n"
    )
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, backend: bool = False) -> None:
    p.add_argument("input", help="input JSONL file, or - for stdin")
    p.add_argument("-o", "--output", help="write here instead of stdout")
    p.add_argument("--config", help="TOML file with default settings")
    if backend:
        p.add_argument("--backend", dest="api_base", help="completion endpoint base URL (default $UQ_API_BASE)")
        p.add_argument("--model")
        p.add_argument("--mock-fixture", help="use the scripted mock backend from this JSON file")
        p.add_argument("--parallelism", type=int, help="max in-flight requests")
        p.add_argument("--temperature", type=float)
        p.add_argument("--top-p", dest="top_p", type=float)
        p.add_argument("--max-tokens", dest="max_tokens", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uq", description="Semantic-uncertainty toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="draw M generations per context")
    _common(p, backend=True)
    p.add_argument("--m", type=int)
    p.add_argument("--allow-missing-logprobs", action="store_true")
    p.set_defaults(func=cmd_sample)

    kinds = [k.value for k in EstimatorKind]
    p = sub.add_parser("entropy", help="cluster samples and compute semantic entropy")
    _common(p)
    p.add_argument("--judge", choices=["binary_rule", "normalized_exact", "remote_nli"])
    p.add_argument("--nli-url", help="NLI endpoint base URL for the remote_nli judge")
    p.add_argument("--estimator", choices=kinds)
    p.add_argument("--all-estimators", action="store_true")
    p.add_argument("--length-normalized", action="store_true")
    p.add_argument("--no-dedup", action="store_true", help="do not merge duplicate texts within clusters")
    p.add_argument("--bits", action="store_true", help="report entropies in bits")
    p.set_defaults(func=cmd_entropy)

    p = sub.add_parser("report", help="sentence-level reliability for generated reports")
    _common(p, backend=True)
    p.add_argument("--text", action="store_true", help="input is a plain-text report")
    p.add_argument("--probes-per-sentence", default="3", help="e.g. 3, 1-5 or 1,3,5")
    p.add_argument("--answers-per-probe", dest="answers_per_probe", type=int)
    p.add_argument("--thresholds", help="THETA_HIGH,THETA_LOW in nats")
    p.add_argument("--estimator", choices=["within_only", "combined"])
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("eval", help="AUROC of uncertainty for error prediction")
    _common(p, backend=True)
    p.add_argument("--metric", choices=["auroc"], default="auroc")
    p.add_argument("--boot", type=int, default=DEFAULT_N_BOOT)
    p.add_argument("--seed", type=int)
    p.add_argument("--ablate", choices=["m", "probes"])
    p.add_argument("--grid", help="grid values, e.g. 5,10,20 or 1-5")
    p.add_argument("--estimators", default=",".join(kinds))
    p.add_argument("--judge", choices=["binary_rule", "normalized_exact", "remote_nli"])
    p.add_argument("--nli-url")
    p.add_argument("--answers-per-probe", dest="answers_per_probe", type=int)
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dpo", help="preference pairs and DPO loss")
    _common(p)
    p.add_argument("--beta", type=float)
    p.add_argument("--min-gap", dest="min_gap", type=float)
    p.add_argument("--score", choices=["token_f1", "external"], default="token_f1")
    p.add_argument("--labeler-url")
    p.set_defaults(func=cmd_dpo)

    p = sub.add_parser("calibrate-thresholds", help="fit reliability thresholds to labeled entropies")
    _common(p)
    p.set_defaults(func=cmd_calibrate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    out: TextIO = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    try:
        return args.func(args, out)
    except DegenerateLabels as e:
        print(f"uq: degenerate data: {e}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (BackendUnavailable, LogprobsMissing, RemoteJudgeUnavailable, ScorerUnavailable) as e:
        print(f"uq: backend failure: {e}", file=sys.stderr)
        return EXIT_BACKEND
    except (UQError, ValueError, OSError, tomli.TOMLDecodeError) as e:
        print(f"uq: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        if out is not sys.stdout:
            out.close()
        else:
            out.flush()


if __name__ == "__main__":
    sys.exit(main())
