"""Command-line entry points: offline invariant-set computation, headless
simulation runs, and the live WebSocket service."""

from __future__ import annotations

import json
import logging
import os
import sys

import click
import numpy as np

from . import world
from .invariance import (CisConfig, InvarianceError, LinearSystem,
                         UncertifiedError, build_atlas, load_atlas, save_atlas,
                         validate_atlas)
from .world import (FRAME_CSV_HEADER, WorldError, default_environment,
                    frame_csv_row, load_environment, run_session,
                    scripted_users)

EXIT_PARSE = 2
EXIT_MISMATCH = 3


def _setup_logging() -> None:
    level = os.environ.get("MISC_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _load_env(path):
    if path is None:
        return default_environment()
    try:
        return load_environment(path)
    except (OSError, json.JSONDecodeError, KeyError, ValueError,
            WorldError) as exc:
        click.echo(f"error: cannot parse environment {path}: {exc}", err=True)
        sys.exit(EXIT_PARSE)


@click.group()
def main() -> None:
    """Minimal-intervention shared control: offline sets, simulation, serving."""
    _setup_logging()


@main.group()
def cis() -> None:
    """Control-invariant set computation and caches."""


@cis.command("compute")
@click.option("--env", "env_file", type=click.Path(), default=None,
              help="Environment JSON (defaults to the built-in maze).")
@click.option("--out", "out_file", type=click.Path(), required=True,
              help="Output atlas cache (*.cis.json).")
@click.option("--workers", type=int, default=1, show_default=True)
def cis_compute(env_file, out_file, workers) -> None:
    """Compute and certify one invariant set per obstacle face."""
    env = _load_env(env_file)
    sys_ = LinearSystem.from_environment(env)
    try:
        atlas = build_atlas(sys_, env, CisConfig(), workers=workers)
    except UncertifiedError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    save_atlas(atlas, out_file)
    for (i, j), entry in sorted(atlas.entries.items()):
        status = "empty" if entry.empty else f"{entry.num_rows} rows"
        click.echo(f"face ({i},{j}): {status}, {entry.iterations} iterations")
    click.echo(f"wrote {len(atlas.entries)} certified entries to {out_file}")


@main.group()
def sim() -> None:
    """Headless game sessions."""


@sim.command("run")
@click.option("--env", "env_file", type=click.Path(), default=None)
@click.option("--atlas", "atlas_file", type=click.Path(), default=None)
@click.option("--policy", type=click.Choice(sorted(scripted_users())),
              default="goal_seeker", show_default=True)
@click.option("--replay", "replay_file", type=click.Path(), default=None,
              help="Input log for --policy replay.")
@click.option("--assist/--no-assist", default=True, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_csv", type=click.Path(), default=None,
              help="Trajectory CSV (one row per 30 Hz frame).")
@click.option("--max-ticks", type=int, default=None)
def sim_run(env_file, atlas_file, policy, replay_file, assist, seed, out_csv,
            max_ticks) -> None:
    """Run one scripted session and print its metrics summary."""
    env = _load_env(env_file)
    atlas = None
    if atlas_file is not None:
        atlas = load_atlas(atlas_file)
        try:
            validate_atlas(atlas, LinearSystem.from_environment(env), env)
        except InvarianceError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_MISMATCH)
    if assist and atlas is None:
        click.echo("error: --assist requires --atlas", err=True)
        sys.exit(EXIT_MISMATCH)

    cls = scripted_users()[policy]
    if policy == "replay":
        if replay_file is None:
            click.echo("error: --policy replay requires --replay FILE", err=True)
            sys.exit(EXIT_PARSE)
        user = cls(replay_file)
    else:
        user = cls()

    metrics, frames = run_session(env, user, assist=assist, seed=seed,
                                  atlas=atlas, max_ticks=max_ticks)
    if out_csv is not None:
        with open(out_csv, "w") as fh:
            fh.write(FRAME_CSV_HEADER + "\n")
            for fr in frames:
                fh.write(frame_csv_row(fr) + "\n")
        click.echo(f"wrote {len(frames)} frames to {out_csv}")
    click.echo(metrics.summary())
    ms = np.array([fr.solve_ms for fr in frames]) if frames else np.zeros(1)
    click.echo(
        f"solve ms: median {np.median(ms):.2f} | p99 "
        f"{np.percentile(ms, 99):.2f} | infeasible {metrics.solver_infeasible} "
        f"| fallback ticks {metrics.fallback_ticks}")


@main.command("serve")
@click.option("--env", "env_file", type=click.Path(), default=None)
@click.option("--atlas", "atlas_file", type=click.Path(), required=True)
@click.option("--assist/--no-assist", default=True, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8700, show_default=True)
@click.option("--out", "record_dir", type=click.Path(), default=None,
              help="Directory for session replay recordings.")
def serve(env_file, atlas_file, assist, host, port, record_dir) -> None:
    """Serve the live WebSocket game loop (endpoint /session)."""
    import uvicorn

    from .gateway import ProtocolError, create_app

    env = _load_env(env_file)
    atlas = load_atlas(atlas_file)
    try:
        validate_atlas(atlas, LinearSystem.from_environment(env), env)
        app = create_app(env, atlas, assist=assist, record_dir=record_dir)
    except (InvarianceError, ProtocolError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_MISMATCH)
    uvicorn.run(app, host=host, port=port,
                log_level=os.environ.get("MISC_LOG", "warning").lower())


if __name__ == "__main__":
    main()
