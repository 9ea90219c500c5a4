"""Thin-client CLI: every command goes through the HTTP service layer.

Without ``--server`` the commands talk to an in-process instance of the
service app over an in-memory transport, so single-machine usage needs no
daemon; with ``--server`` they target a running ``tripletforge serve``.

Exit codes: 0 success, 2 config error, 3 dependency error, 4 backend
exhaustion, 5 integrity error.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click
import httpx
import yaml


def _client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=600.0)
    import warnings

    with warnings.catch_warnings():
        # starlette warns about the host httpx major at import; not actionable here
        warnings.simplefilter("ignore")
        from starlette.testclient import TestClient

    from .service.app import create_app

    return TestClient(create_app(), base_url="http://tripletforge.local")


def _load_raw_config(path: str, run_id: str | None) -> tuple[dict, str]:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    except yaml.YAMLError as exc:
        click.echo(f"config error: not valid YAML: {exc}", err=True)
        sys.exit(2)
    if not isinstance(data, dict):
        click.echo("config error: config must be a mapping", err=True)
        sys.exit(2)
    if run_id:
        data["run_id"] = run_id
    base_dir = str(Path(path).resolve().parent)
    return data, base_dir


def _fail_from_response(resp: httpx.Response) -> None:
    try:
        body = resp.json()
    except ValueError:
        click.echo(f"service error: HTTP {resp.status_code}", err=True)
        sys.exit(1)
    click.echo(f"error: {body.get('error', resp.text)}", err=True)
    sys.exit(int(body.get("exit_code", 1)))


@click.group()
@click.option("--config", "config_path", type=click.Path(), default="pipeline.yaml",
              show_default=True, help="Run configuration file.")
@click.option("--run-id", default=None, help="Override the config's run_id.")
@click.option("--mock", is_flag=True, default=False,
              help="Refuse to run unless every backend is a mock (offline mode).")
@click.option("--resume/--no-resume", default=True, show_default=True,
              help="Resume interrupted stages from their journals.")
@click.option("--server", default=None, envvar="TRIPLETFORGE_SERVER",
              help="Service URL; omitted = run the service in-process.")
@click.pass_context
def main(ctx: click.Context, config_path: str, run_id: str | None, mock: bool,
         resume: bool, server: str | None) -> None:
    """Pipeline for verified coding question-solution-test triplets."""
    ctx.ensure_object(dict)
    ctx.obj.update(
        config_path=config_path, run_id=run_id, mock=mock, resume=resume, server=server
    )


def _run_stage_command(ctx: click.Context, stage: str) -> None:
    opts = ctx.obj
    data, base_dir = _load_raw_config(opts["config_path"], opts["run_id"])
    with _client(opts["server"]) as client:
        validated = client.post(
            "/config/validate", json={"config": data, "base_dir": base_dir}
        )
        if validated.status_code == 200 and not validated.json()["valid"]:
            for error in validated.json()["errors"]:
                click.echo(f"config error: {error}", err=True)
            sys.exit(2)
        resp = client.post(
            f"/runs/{data.get('run_id')}/stages/{stage}",
            json={
                "config": data,
                "base_dir": base_dir,
                "mock": opts["mock"],
                "resume": opts["resume"],
            },
        )
        if resp.status_code != 200:
            _fail_from_response(resp)
        summary = resp.json()
        reasons = summary.get("discard_reasons") or {}
        reason_text = (
            " [" + ", ".join(f"{k}={v}" for k, v in sorted(reasons.items())) + "]"
            if reasons else ""
        )
        click.echo(
            f"{summary['stage']}: {summary['status']} "
            f"input={summary['input']} retained={summary['retained']} "
            f"discarded={summary['discarded']}{reason_text}"
        )


def _make_stage_command(stage: str, help_text: str):
    @click.pass_context
    def command(ctx: click.Context) -> None:
        _run_stage_command(ctx, stage)

    command.__name__ = stage
    return main.command(name=stage, help=help_text)(command)


_make_stage_command("synth", "Step 1: synthesize questions across enabled subsets.")
_make_stage_command("dedup", "Semantic deduplication within each subset.")
_make_stage_command("verify", "Step 2: solution/test generation with self-verification.")
_make_stage_command("convert", "Step 3a: rewrite questions into completion style.")
_make_stage_command("distill", "Step 3b: CoT distillation with test-based reject sampling.")
_make_stage_command("analyze", "Measure the run: pass@k, difficulty, contamination, data flow.")


@main.command(help="Validate the configuration file and print every problem.")
@click.pass_context
def validate(ctx: click.Context) -> None:
    opts = ctx.obj
    data, base_dir = _load_raw_config(opts["config_path"], opts["run_id"])
    with _client(opts["server"]) as client:
        resp = client.post("/config/validate", json={"config": data, "base_dir": base_dir})
        if resp.status_code != 200:
            _fail_from_response(resp)
        body = resp.json()
        if not body["valid"]:
            for error in body["errors"]:
                click.echo(f"config error: {error}", err=True)
            sys.exit(2)
        click.echo("config ok")


@main.command(help="Show the run manifest and the human-readable summary.")
@click.option("--name", default="summary.txt", show_default=True,
              help="Report file to fetch alongside the manifest.")
@click.pass_context
def report(ctx: click.Context, name: str) -> None:
    opts = ctx.obj
    data, base_dir = _load_raw_config(opts["config_path"], opts["run_id"])
    run_id = data.get("run_id", "")
    runs_root = data.get("runs_root", "runs")
    if not Path(runs_root).is_absolute():
        runs_root = str(Path(base_dir) / runs_root)
    with _client(opts["server"]) as client:
        resp = client.get(f"/runs/{run_id}/manifest", params={"runs_root": runs_root})
        if resp.status_code != 200:
            _fail_from_response(resp)
        manifest = resp.json()["manifest"]
        click.echo(f"run {run_id}")
        stage_counts = manifest.get("stage_counts", {})
        from .records import STAGE_ORDER

        for stage in STAGE_ORDER:
            counts = stage_counts.get(stage)
            if counts is None:
                continue
            click.echo(
                f"  {stage:8s} input={counts['input']} retained={counts['retained']} "
                f"discarded={counts['discarded']}"
            )
        resp = client.get(
            f"/runs/{run_id}/reports/{name}", params={"runs_root": runs_root}
        )
        if resp.status_code == 200:
            payload = resp.json()["report"]
            click.echo(payload if isinstance(payload, str) else yaml.safe_dump(payload))


@main.command(help="Start the HTTP service.")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8765, show_default=True, type=int)
@click.option("--runs-root", default=None, help="Root directory for run lookups.")
def serve(host: str, port: int, runs_root: str | None) -> None:
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(runs_root), host=host, port=port)


if __name__ == "__main__":
    main()
