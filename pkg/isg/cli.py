"""
Command line entry point: `isg eval`, `isg agent run`, `isg tools serve`.

Exit codes: 0 success, 2 corpus or config schema error, 3 backend unreachable
or fixture miss, 4 report could not be written.
"""

import asyncio
import json
import logging
from pathlib import Path
from typing import Optional

import typer

from isg.agent.pipeline import AgentPipeline, write_agent_output
from isg.agent.tools import build_tool_client
from isg.bench import REPORT_FORMATS, Taxonomy, emit_report, evaluate_corpus, load_corpus
from isg.config import VqaMode, configure_logging, load_run_config, load_tools_config
from isg.content import InterleavedSequence
from isg.errors import (
    BackendUnreachable,
    DuplicateSampleId,
    FixtureMiss,
    ReportWriteError,
    SchemaViolation,
)
from isg.gateway import BackendKind, ModelGateway

logger = logging.getLogger(__name__)

app = typer.Typer(help="Interleaved text-and-image generation: evaluation and agent.", no_args_is_help=True)
agent_app = typer.Typer(help="Answer-generation agent.", no_args_is_help=True)
tools_app = typer.Typer(help="Tool server.", no_args_is_help=True)
app.add_typer(agent_app, name="agent")
app.add_typer(tools_app, name="tools")

EXIT_SCHEMA = 2
EXIT_BACKEND = 3
EXIT_REPORT = 4


@app.callback()
def main(log_level: str = typer.Option("INFO", "--log-level", help="Logging level")):
    configure_logging(log_level)


def _backend_overrides(backend: Optional[BackendKind], fixture: Optional[Path]) -> dict:
    return {"kind": backend, "fixture": fixture}


@app.command("eval")
def eval_command(
    corpus: Path = typer.Option(..., "--corpus", help="Corpus directory with samples/"),
    answers: Path = typer.Option(..., "--answers", help="Directory of <sample id>.json answers"),
    out: Path = typer.Option(Path("out"), "--out", help="Output directory"),
    backend: Optional[BackendKind] = typer.Option(None, "--backend", help="http or mock"),
    config: Optional[Path] = typer.Option(None, "--config", help="TOML run configuration"),
    fixture: Optional[Path] = typer.Option(None, "--fixture", help="Mock backend fixture JSON"),
    vqa_mode: Optional[VqaMode] = typer.Option(None, "--vqa-mode", help="score or yesno"),
    levels: Optional[str] = typer.Option(None, "--levels", help="Comma-separated levels"),
    workers: Optional[int] = typer.Option(None, "--workers", help="Concurrent samples"),
    no_golden: bool = typer.Option(False, "--no-golden", help="Holistic judge without golden answers"),
    formats: Optional[list[str]] = typer.Option(None, "--format", help=f"Outputs besides report.json (default: all of {', '.join(REPORT_FORMATS)})"),
):
    """Evaluate a directory of answers against a corpus."""
    try:
        run_config = load_run_config(
            config,
            backend_overrides=_backend_overrides(backend, fixture),
            eval_overrides={
                "vqa_mode": vqa_mode,
                "levels": levels,
                "workers": workers,
                "use_golden": False if no_golden else None,
            },
        )
        taxonomy_path = corpus / "taxonomy.json"
        taxonomy = Taxonomy.load(taxonomy_path if taxonomy_path.exists() else None)
        samples = load_corpus(corpus, taxonomy)
    except (SchemaViolation, DuplicateSampleId) as e:
        logger.error(str(e))
        raise typer.Exit(code=EXIT_SCHEMA)

    if not samples:
        logger.error(f"No samples found in {corpus}")
        raise typer.Exit(code=EXIT_SCHEMA)

    gateway = ModelGateway.from_config(run_config.backend, run_config.eval.decoding)
    try:
        run = asyncio.run(evaluate_corpus(samples, answers, gateway, run_config, out))
    except (BackendUnreachable, FixtureMiss) as e:
        logger.error(str(e))
        raise typer.Exit(code=EXIT_BACKEND)
    except ReportWriteError as e:
        logger.error(str(e))
        raise typer.Exit(code=EXIT_REPORT)

    try:
        emit_report(run, out, tuple(formats) if formats else REPORT_FORMATS, ledger=gateway.ledger, taxonomy=taxonomy)
    except ValueError as e:
        logger.error(str(e))
        raise typer.Exit(code=EXIT_SCHEMA)
    except ReportWriteError as e:
        logger.error(str(e))
        raise typer.Exit(code=EXIT_REPORT)

    for level, row in run.levels.items():
        typer.echo(f"{level}: {row.avg_by_sample:.3f} (samples), {row.avg_by_category:.3f} (categories)")


def load_query(path: Path) -> InterleavedSequence:
    """A corpus sample file (its `query`) or a bare interleaved document."""
    with open(path, "r", encoding="utf-8") as f:
        document = json.load(f)
    if isinstance(document, dict) and "query" in document:
        document = document["query"]
    return InterleavedSequence.from_document(document, base_dir=path.parent)


@agent_app.command("run")
def agent_run(
    query: Path = typer.Option(..., "--query", help="Sample file or interleaved document"),
    out: Path = typer.Option(Path("answer.json"), "--out", help="Answer document to write"),
    tools: Optional[Path] = typer.Option(None, "--tools", help="tools.toml; every tool is mocked when omitted"),
    backend: Optional[BackendKind] = typer.Option(None, "--backend", help="http or mock"),
    config: Optional[Path] = typer.Option(None, "--config", help="TOML run configuration"),
    fixture: Optional[Path] = typer.Option(None, "--fixture", help="Mock backend fixture JSON"),
    no_smooth: bool = typer.Option(False, "--no-smooth", help="Skip the smoothing pass"),
):
    """Plan, execute and refine an answer for one query."""
    try:
        run_config = load_run_config(config, backend_overrides=_backend_overrides(backend, fixture))
        endpoints = load_tools_config(tools)
        sequence = load_query(query)
    except SchemaViolation as e:
        logger.error(str(e))
        raise typer.Exit(code=EXIT_SCHEMA)
    except (OSError, ValueError) as e:
        logger.error(f"Cannot read query {query}: {e}")
        raise typer.Exit(code=EXIT_SCHEMA)

    gateway = ModelGateway.from_config(run_config.backend, run_config.eval.decoding)
    pipeline = AgentPipeline(gateway, build_tool_client(endpoints), smooth=not no_smooth)
    try:
        result = asyncio.run(pipeline.run(sequence))
    except (BackendUnreachable, FixtureMiss) as e:
        logger.error(str(e))
        raise typer.Exit(code=EXIT_BACKEND)

    try:
        summary = write_agent_output(result, out)
    except OSError as e:
        logger.error(f"Cannot write answer to {out}: {e}")
        raise typer.Exit(code=EXIT_REPORT)
    typer.echo(json.dumps(summary, sort_keys=True))


@tools_app.command("serve")
def tools_serve(
    host: str = typer.Option("0.0.0.0", "--host"),
    port: int = typer.Option(8010, "--port"),
):
    """Serve the tool box over HTTP."""
    from isg.agent.tool_server import serve

    serve(host, port)


if __name__ == "__main__":
    app()
