"""Command-line surface: graph, port and eval subcommands.

Exit codes: 0 completed (skipped declarations included), 1 fatal error
while processing, 2 usage or input error. Stdout stays timestamp-free so
identical runs produce identical output; timestamps live in log files.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .depgraph import bottom_up_order, build_graph, graph_to_json
from .errors import (
    CheckportError,
    EncodingError,
    IoError,
    ParseError,
)
from .evaluate import load_ground_truth, score_tree, text_report
from .gateway import (
    HttpBackend,
    HttpConfig,
    MockBackend,
    RecordingBackend,
    ReplayBackend,
    ReplayStore,
)
from .orchestrator import PipelineConfig, run_pipeline
from .prompts import DEFAULT_TOKEN_BUDGET
from .source_model import extract_declarations, parse_units

ENV_API_URL = "CHECKPORT_API_URL"
ENV_API_KEY = "CHECKPORT_API_KEY"
ENV_MODEL = "CHECKPORT_MODEL"


@dataclass
class RunConfig:
    inputs: list[str] = field(default_factory=list)
    manifest: str = ""
    out: str = ""
    backend: str = "mock"
    completions: int = 10
    passes: tuple[int, ...] = (1, 2, 3)
    cache: str = ""
    budget: int = DEFAULT_TOKEN_BUDGET
    spelling: str = "short"
    log_dir: str = ""
    gt: str = ""
    api_url: str = ""
    api_key: str = ""
    model: str = ""
    temperature: float | None = None
    record: bool = False
    seed_label: str = ""

    def validate(self) -> None:
        if self.completions < 1:
            raise ValueError("completions must be at least 1")
        if not self.passes:
            raise ValueError("passes must not be empty")
        if list(self.passes) != sorted(set(self.passes)) \
                or any(p not in (1, 2, 3) for p in self.passes):
            raise ValueError("passes must be an ordered subset of 1,2,3")
        if self.spelling not in ("short", "long"):
            raise ValueError("spelling must be 'short' or 'long'")
        if self.backend not in ("mock", "replay", "http"):
            raise ValueError("backend must be mock, replay or http")


def _read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"bad config line (expected key=value): {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _gather_inputs(config: RunConfig) -> list[Path]:
    paths = [Path(p) for p in config.inputs]
    if config.manifest:
        mpath = Path(config.manifest)
        base = mpath.parent
        try:
            manifest_text = mpath.read_text(encoding="utf-8")
        except OSError as e:
            raise IoError(f"cannot read manifest {mpath}: {e}") from e
        for raw in manifest_text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            p = Path(line)
            paths.append(p if p.is_absolute() else base / p)
    if not paths:
        raise ValueError("no input files (use --input and/or --manifest)")
    return paths


def _build_config(args: argparse.Namespace) -> RunConfig:
    file_values = _read_config_file(args.config) if getattr(args, "config", None) else {}

    def pick(flag_value, key, default, convert=str):
        if flag_value is not None:
            return flag_value
        if key in file_values:
            return convert(file_values[key])
        return default

    passes = pick(getattr(args, "passes", None), "passes", "1,2,3")
    if isinstance(passes, str):
        passes = tuple(int(p) for p in passes.split(",") if p.strip())
    config = RunConfig(
        inputs=list(getattr(args, "input", None) or
                    ([file_values["input"]] if "input" in file_values else [])),
        manifest=pick(getattr(args, "manifest", None), "manifest", ""),
        out=pick(getattr(args, "out", None), "out", ""),
        backend=pick(getattr(args, "backend", None), "backend", "mock"),
        completions=pick(getattr(args, "completions", None), "completions",
                         10, int),
        passes=passes,
        cache=pick(getattr(args, "cache", None), "cache", ""),
        budget=pick(getattr(args, "budget", None), "budget",
                    DEFAULT_TOKEN_BUDGET, int),
        spelling=pick(getattr(args, "spelling", None), "spelling", "short"),
        log_dir=pick(getattr(args, "log_dir", None), "log_dir", ""),
        gt=pick(getattr(args, "gt", None), "gt", ""),
        api_url=pick(getattr(args, "api_url", None), "api_url",
                     os.environ.get(ENV_API_URL, "")),
        api_key=pick(getattr(args, "api_key", None), "api_key",
                     os.environ.get(ENV_API_KEY, "")),
        model=pick(getattr(args, "model", None), "model",
                   os.environ.get(ENV_MODEL, "")),
        temperature=pick(getattr(args, "temperature", None), "temperature",
                         None, float),
        record=bool(getattr(args, "record", False)
                    or file_values.get("record") == "true"),
        seed_label=file_values.get("seed_label", ""),
    )
    config.validate()
    return config


def _make_backend(config: RunConfig):
    if config.backend == "mock":
        return MockBackend()
    if config.backend == "replay":
        if not config.cache:
            raise ValueError("replay backend needs --cache")
        return ReplayBackend(ReplayStore(config.cache))
    if not config.api_url:
        raise ValueError(f"http backend needs --api-url or ${ENV_API_URL}")
    backend = HttpBackend(HttpConfig(
        url=config.api_url, api_key=config.api_key,
        model=config.model or "default", temperature=config.temperature))
    if config.record:
        if not config.cache:
            raise ValueError("--record needs --cache")
        return RecordingBackend(backend, ReplayStore(config.cache))
    return backend


def _salt(config: RunConfig) -> str:
    temp = "default" if config.temperature is None else str(config.temperature)
    return f"{config.model or 'default'}|{temp}"


def cmd_graph(config: RunConfig) -> int:
    units = parse_units(_gather_inputs(config))
    decls = extract_declarations(units)
    graph = build_graph(decls)
    order = bottom_up_order(graph)
    doc = graph_to_json(graph, order, decls)
    text = json.dumps(doc, indent=2) + "\n"
    if config.out:
        Path(config.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_port(config: RunConfig) -> int:
    if not config.out:
        raise ValueError("port needs --out for the transformed tree")
    inputs = _gather_inputs(config)
    units = parse_units(inputs)
    decls = extract_declarations(units)
    backend = _make_backend(config)
    pipeline_config = PipelineConfig(
        n_completions=config.completions, passes=config.passes,
        token_budget=config.budget, spelling=config.spelling,
        salt=_salt(config), log_dir=config.log_dir or None)
    result = run_pipeline(units, decls, backend, pipeline_config)

    out_root = Path(config.out)
    roots = {Path(p).resolve().parent for p in inputs}
    common = Path(os.path.commonpath([str(r) for r in roots])) if roots else None
    for unit_path, text in result.outputs.items():
        rel = Path(unit_path).resolve().relative_to(common) if common \
            else Path(unit_path).name
        target = out_root / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(text, encoding="utf-8")

    if config.log_dir:
        report = result.report_json()
        if config.seed_label:
            report["seed_label"] = config.seed_label
        (Path(config.log_dir) / "run_report.json").write_text(
            json.dumps(report, indent=2) + "\n", encoding="utf-8")

    print(f"{'pass':<18}{'queries':>8}{'applied':>8}{'empty':>7}"
          f"{'skipped':>8}{'rejected':>9}{'added':>7}{'dropped':>8}")
    for report in result.reports:
        print(f"{report.pass_id:<18}{report.queries:>8}"
              f"{report.count('applied'):>8}{report.count('empty'):>7}"
              f"{report.count('skipped'):>8}{report.count('rejected'):>9}"
              f"{report.annotations_added:>7}{report.annotations_dropped:>8}")
    skipped = sum(r.count("skipped") for r in result.reports)
    if skipped:
        print(f"note: {skipped} declaration visits skipped "
              "(see log for reasons)")
    return 0


def cmd_eval(config: RunConfig) -> int:
    if not config.gt:
        raise ValueError("eval needs --gt with the ground-truth JSONL")
    inputs = _gather_inputs(config)
    try:
        gt = load_ground_truth(config.gt)
    except OSError as e:
        raise IoError(f"cannot read ground truth {config.gt}: {e}") from e
    metrics, verdicts, edits = score_tree(inputs, gt, missing="report")
    sys.stdout.write(text_report(metrics, verdicts, edits))
    doc = json.dumps(metrics.to_json(), indent=2) + "\n"
    if config.out:
        Path(config.out).write_text(doc, encoding="utf-8")
    else:
        sys.stdout.write(doc)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="checkport",
        description="Port C code toward the Checked C dialect with "
                    "model-driven, dependency-ordered rewriting.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--input", nargs="+", metavar="FILE",
                       help="C source files")
        p.add_argument("--manifest", help="file listing one input path per line")
        p.add_argument("--out", help="output file or directory")
        p.add_argument("--config", help="key=value config file (flags override)")
        p.add_argument("-v", "--verbose", action="store_true")

    g = sub.add_parser("graph", help="dump the dependency graph as JSON")
    common(g)

    p = sub.add_parser("port", help="run the transformation pipeline")
    common(p)
    p.add_argument("--backend", choices=["mock", "replay", "http"])
    p.add_argument("--completions", type=int, metavar="N",
                   help="completions per query (default 10)")
    p.add_argument("--passes", metavar="LIST",
                   help="comma-separated subset of 1,2,3 (default all)")
    p.add_argument("--cache", metavar="DIR", help="replay store directory")
    p.add_argument("--budget", type=int, metavar="TOKENS",
                   help="prompt token budget")
    p.add_argument("--spelling", choices=["short", "long"],
                   help="emit arr<T>/ptr<T> or _Array_ptr<T>/_Ptr<T>")
    p.add_argument("--log-dir", dest="log_dir", metavar="DIR")
    p.add_argument("--record", action="store_true",
                   help="record http responses into --cache")
    p.add_argument("--api-url", dest="api_url")
    p.add_argument("--api-key", dest="api_key")
    p.add_argument("--model")
    p.add_argument("--temperature", type=float)

    e = sub.add_parser("eval", help="score a transformed tree against "
                                    "ground-truth annotations")
    common(e)
    e.add_argument("--gt", metavar="JSONL", help="ground-truth entries")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _build_config(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    handler = {"graph": cmd_graph, "port": cmd_port, "eval": cmd_eval}[args.command]
    try:
        return handler(config)
    except (IoError, EncodingError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ParseError, CheckportError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
