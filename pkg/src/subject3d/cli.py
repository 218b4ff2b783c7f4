"""Command-line interface: make-corpus / run / resume / eval."""

from __future__ import annotations

import json
from pathlib import Path

import click

from .errors import Subject3DError


@click.group()
def main():
    """Subject-driven 3D generation pipeline (desk scale)."""


@main.command("make-corpus")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Corpus output directory.")
@click.option("--subjects", default=16, show_default=True, help="Number of procedural subjects.")
@click.option("--resolution", default=32, show_default=True, help="Render resolution (even).")
@click.option("--seed", default=7, show_default=True, help="Corpus generator seed.")
@click.option("--train-split", default=8, show_default=True, help="Subjects (from the end) used to pretrain the base models.")
@click.option("--pretrain-steps", default=6000, show_default=True, help="Pretraining steps per base model.")
@click.option("--train-timesteps", default=200, show_default=True, help="Diffusion schedule length T.")
@click.option("--pretrain/--no-pretrain", default=True, show_default=True, help="Also pretrain and save the base model checkpoints.")
def make_corpus_cmd(out_dir, subjects, resolution, seed, train_split, pretrain_steps, train_timesteps, pretrain):
    """Generate the procedural corpus (and the pretrained base checkpoints)."""
    from .checkpoint import save_checkpoint
    from .corpus import generate_corpus
    from .encoders import HashTextEncoder, ImageFeatureEncoder
    from .pretrain import PretrainConfig, pretrain_multiview, pretrain_personalizer
    from .schedule import build_schedule

    out = Path(out_dir)
    corpus = generate_corpus(out, n_subjects=subjects, resolution=resolution, seed=seed)
    click.echo(f"corpus: {subjects} subjects at {resolution}px -> {out}")
    if not pretrain:
        return
    if train_split > subjects:
        raise click.UsageError("--train-split cannot exceed --subjects")
    train_ids = [s.subject_id for s in corpus.subjects[-train_split:]]
    sched = build_schedule(train_timesteps)
    encoder = ImageFeatureEncoder(input_resolution=resolution)
    text_encoder = HashTextEncoder()
    cfg = PretrainConfig(steps=pretrain_steps)
    pc = pretrain_personalizer(corpus, train_ids, sched, cfg, encoder, text_encoder)
    h1 = save_checkpoint(out / "base_personalizer.npz", pc, sched.descriptor())
    pm = pretrain_multiview(corpus, train_ids, sched, cfg, encoder, text_encoder)
    h2 = save_checkpoint(out / "base_multiview.npz", pm, sched.descriptor())
    (out / "pretrain.json").write_text(
        json.dumps(
            {
                "train_subjects": train_ids,
                "steps": pretrain_steps,
                "train_timesteps": train_timesteps,
                "personalizer_hash": h1,
                "multiview_hash": h2,
            },
            indent=2,
        )
    )
    click.echo(f"base checkpoints: personalizer {h1[:12]}, multiview {h2[:12]}")


@main.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--workspace", type=click.Path(), default=None, help="Run directory (overrides config).")
@click.option("--seed", type=int, default=None, help="Root seed (overrides config).")
@click.option("--stage-until", type=str, default=None, help="Stop after this stage (inclusive).")
@click.option("--toy/--full", "toy", default=None, help="Force the toy or paper profile.")
def run_cmd(config_path, workspace, seed, stage_until, toy):
    """Run the full pipeline in a fresh workspace."""
    from .config import load_config
    from .pipeline import run_pipeline

    if toy is not None:
        import tempfile

        import yaml

        cfg = load_config(config_path)
        doc = dict(cfg.raw)
        doc["profile"] = "toy" if toy else "paper"
        tmp = tempfile.NamedTemporaryFile("w", suffix=".yaml", delete=False)
        yaml.safe_dump(doc, tmp)
        tmp.close()
        config_path = tmp.name
    try:
        manifest = run_pipeline(config_path, workspace=workspace, seed=seed, stage_until=stage_until)
    except Subject3DError as exc:
        raise click.ClickException(str(exc))
    _echo_manifest(manifest)


@main.command("resume")
@click.option("--workspace", required=True, type=click.Path(exists=True), help="Workspace or manifest path.")
@click.option("--stage-until", type=str, default=None)
def resume_cmd(workspace, stage_until):
    """Resume an interrupted run; completed stages are not re-executed."""
    from .pipeline import resume_pipeline

    try:
        manifest = resume_pipeline(workspace, stage_until=stage_until)
    except Subject3DError as exc:
        raise click.ClickException(str(exc))
    _echo_manifest(manifest)


@main.command("eval")
@click.option("--workspace", required=True, type=click.Path(exists=True), help="Finished run workspace.")
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--subject-id", required=True, help="Corpus subject whose prompt is the retrieval target.")
@click.option("--renders", "n_renders", default=160, show_default=True)
@click.option("--elevation", default=40.0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Report directory (default: workspace/eval).")
@click.option("--judge-layout", type=click.Choice(["4-view", "9-view"]), default="4-view", show_default=True)
@click.option("--with-judge/--no-judge", default=True, show_default=True, help="Include a stub-judge comparison of splats vs mesh renders.")
def eval_cmd(workspace, corpus_path, subject_id, n_renders, elevation, out_dir, judge_layout, with_judge):
    """Turntable renders, retrieval precision, and the report tables."""
    from .corpus import Corpus
    from .evalkit import clip_r_precision, corpus_retrieval_encoders, eval_report, render_turntable
    from .gaussians import GaussianSet
    from .judge import StubJudgeClient, judge_instruction, vision_judge_compare
    from .meshing import import_mesh

    ws = Path(workspace)
    splat_path = ws / "stages/reconstruction/gaussians.npz"
    if not splat_path.exists():
        raise click.ClickException(f"no reconstruction artifacts under {ws}")
    corpus = Corpus.load(corpus_path)
    splats = GaussianSet.load(splat_path)
    renders = render_turntable(
        splats, n_azimuth=n_renders, elevation_deg=elevation, resolution=corpus.resolution
    )
    info = corpus.subject(subject_id)
    distractors = [s.prompt for s in corpus.subjects if s.subject_id != subject_id]
    encoders = corpus_retrieval_encoders(corpus)
    report = clip_r_precision(renders, info.prompt, distractors, encoders, elevation_deg=elevation)
    judgments = []
    if with_judge:
        mesh = import_mesh(ws / "stages/reconstruction/mesh.ply")
        mesh_renders = render_turntable(
            mesh, n_azimuth=9, elevation_deg=elevation, resolution=corpus.resolution
        )
        judgments.append(
            vision_judge_compare(
                renders,
                mesh_renders,
                judge_instruction(f"which rendering of '{info.prompt}' looks better"),
                judge_layout,
                StubJudgeClient(seed=0),
            )
        )
    table = eval_report([("cascade+splats", report)], judgments)
    out = Path(out_dir or ws / "eval")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(table.to_csv())
    (out / "report.txt").write_text(table.to_text())
    click.echo(table.to_text())
    click.echo(f"reports written to {out}")


def _echo_manifest(manifest) -> None:
    for s in manifest.stages:
        click.echo(f"  {s['name']:<20} {s['duration_s']:8.2f}s  {len(s['artifacts'])} artifacts")
    if manifest.failure:
        click.echo(f"  FAILED at {manifest.failure['stage']}: {manifest.failure['error']}")


if __name__ == "__main__":
    main()
