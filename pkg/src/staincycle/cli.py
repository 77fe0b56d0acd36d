"""Command-line entry point: synth, edges, train, translate, eval."""

from __future__ import annotations

import datetime
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .data import (DataError, SynthSpec, load_image, load_manifest, save_image,
                   write_synthetic_dataset)
from .metrics import BrownThresholds, EvalConfig, evaluate_dataset, write_report
from .structure import CannyParams, canny_edges
from .training import TrainConfig, train, translate as run_translate
from .data import StainPatch, Stain


def write_run_metadata(out_dir: Path, seed: int, config_snapshot: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "command_line": sys.argv,
        "config": config_snapshot,
        "seed": seed,
        "version": __version__,
        "started": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    tmp = out_dir / "run_metadata.json.tmp"
    tmp.write_text(json.dumps(doc, indent=2, default=str))
    tmp.rename(out_dir / "run_metadata.json")


@click.group()
@click.option("--seed", type=int, default=0, show_default=True,
              help="Seed for all randomness in the invoked subcommand.")
@click.option("--verbose", is_flag=True, default=False)
@click.pass_context
def cli(ctx: click.Context, seed: int, verbose: bool) -> None:
    """Virtual staining toolkit: synthesize data, extract edges, train, translate, evaluate."""
    ctx.ensure_object(dict)
    ctx.obj["seed"] = seed
    ctx.obj["verbose"] = verbose


@cli.command()
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False),
              required=True, help="JSON synthesis spec.")
@click.option("--n", "n_pairs", type=int, required=True, help="Number of pairs to generate.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.pass_context
def synth(ctx: click.Context, spec_path: str, n_pairs: int, out_dir: str) -> None:
    """Generate a synthetic H&E/IHC dataset with ground truth and a manifest."""
    spec = SynthSpec.from_dict(json.loads(Path(spec_path).read_text()))
    seed = ctx.obj["seed"]
    out = Path(out_dir)
    manifest_path = write_synthetic_dataset(spec, n_pairs, out, seed)
    write_run_metadata(out, seed, {"spec": spec.to_dict(), "n": n_pairs})
    click.echo(f"wrote {n_pairs} pairs and {manifest_path}")


@cli.command()
@click.option("--in", "in_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--sigma", type=float, default=1.4, show_default=True)
@click.option("--low", type=float, default=0.1, show_default=True)
@click.option("--high", type=float, default=0.2, show_default=True)
@click.pass_context
def edges(ctx: click.Context, in_dir: str, out_dir: str, sigma: float,
          low: float, high: float) -> None:
    """Write binary Canny edge PNGs (0/255) for every PNG in a directory."""
    params = CannyParams(sigma=sigma, low=low, high=high)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = sorted(Path(in_dir).glob("*.png"))
    if not names:
        raise click.ClickException(f"no PNG images in {in_dir}")
    for path in names:
        edge = canny_edges(load_image(path), params).values
        from PIL import Image
        Image.fromarray((edge * 255).astype(np.uint8), mode="L").save(out / path.name)
    write_run_metadata(out, ctx.obj["seed"],
                       {"sigma": sigma, "low": low, "high": high, "n_images": len(names)})
    click.echo(f"wrote {len(names)} edge maps to {out}")


@cli.command(name="train")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), required=True)
@click.option("--data", "data_path", type=click.Path(dir_okay=False), default=None,
              help="Dataset manifest JSON.")
@click.option("--synth", "synth_path", type=click.Path(dir_okay=False), default=None,
              help="Synthesis spec JSON; generates a dataset under the output directory.")
@click.option("--synth-pairs", type=int, default=200, show_default=True,
              help="Pairs to generate when --synth is used.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.pass_context
def train_cmd(ctx: click.Context, config_path: str, data_path: str | None,
              synth_path: str | None, synth_pairs: int, out_dir: str) -> None:
    """Train the bidirectional staining model from a manifest or synthetic data."""
    if not Path(config_path).is_file():
        raise click.UsageError(f"config file not found: {config_path}")
    if (data_path is None) == (synth_path is None):
        raise click.UsageError("exactly one of --data or --synth is required")
    config = TrainConfig.from_dict(json.loads(Path(config_path).read_text()))
    if ctx.obj["seed"]:
        config.seed = ctx.obj["seed"]
    out = Path(out_dir)
    if synth_path is not None:
        spec = SynthSpec.from_dict(json.loads(Path(synth_path).read_text()))
        if spec.image_size != config.image_size:
            raise click.UsageError(
                f"synthesis image_size {spec.image_size} != train image_size {config.image_size}")
        manifest_path = write_synthetic_dataset(spec, synth_pairs, out / "synth_data", config.seed)
    else:
        manifest_path = Path(data_path)
    manifest = load_manifest(manifest_path)
    write_run_metadata(out, config.seed, config.to_dict())
    final = train(config, manifest, out)
    click.echo(f"final checkpoint: {final}")


@cli.command(name="translate")
@click.option("--ckpt", "ckpt_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--in", "in_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--direction", type=click.Choice(["he_to_ihc", "ihc_to_he"]), required=True)
@click.pass_context
def translate_cmd(ctx: click.Context, ckpt_dir: str, in_dir: str, out_dir: str,
                  direction: str) -> None:
    """Run inference on a directory of patches; writes generated PNGs + edge maps."""
    names = sorted(Path(in_dir).glob("*.png"))
    if not names:
        raise click.ClickException(f"no PNG images in {in_dir}")
    src_stain = Stain.HE if direction == "he_to_ihc" else Stain.CDX2
    patches = [StainPatch(load_image(p), src_stain, "cli") for p in names]
    generated, edge_maps = run_translate(ckpt_dir, patches, direction)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    from PIL import Image
    for path, patch, edge in zip(names, generated, edge_maps):
        save_image(patch.pixels, out / path.name)
        Image.fromarray((edge.values * 255).astype(np.uint8), mode="L").save(
            out / f"{path.stem}_edge.png")
    write_run_metadata(out, ctx.obj["seed"],
                       {"checkpoint": str(ckpt_dir), "direction": direction,
                        "n_images": len(names)})
    click.echo(f"wrote {len(names)} translated patches to {out}")


@cli.command(name="eval")
@click.option("--gen", "gen_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--ref", "ref_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--segmenter", type=click.Choice(["local", "remote"]), default="local",
              show_default=True)
@click.option("--endpoint", type=str, default=None, help="Remote segmentation service URL.")
@click.option("--min-area", type=int, default=12, show_default=True)
@click.option("--report", "report_path", type=click.Path(dir_okay=False), required=True)
@click.pass_context
def eval_cmd(ctx: click.Context, gen_dir: str, ref_dir: str, segmenter: str,
             endpoint: str | None, min_area: int, report_path: str) -> None:
    """Evaluate generated patches against references; writes JSON/CSV plus figures."""
    config = EvalConfig(thresholds=BrownThresholds(), min_area=min_area,
                        segmenter=segmenter, endpoint=endpoint)
    report, per_patch = evaluate_dataset(gen_dir, ref_dir, config)
    out_path = Path(report_path)
    write_report(report, per_patch, out_path, config)
    write_run_metadata(out_path.parent, ctx.obj["seed"],
                       {"gen": str(gen_dir), "ref": str(ref_dir),
                        "segmenter": segmenter, "min_area": min_area})
    click.echo(json.dumps({
        "fid": report.fid, "ssim": report.ssim, "dice": report.dice, "iou": report.iou,
        "r_total": report.r_total}, sort_keys=True))


def run(argv: list[str]) -> int:
    """Dispatch argv to a subcommand: 0 success, 1 usage error, 2 runtime error."""
    try:
        cli.main(args=argv, standalone_mode=False, obj={})
        return 0
    except click.exceptions.Exit as e:
        return int(e.exit_code)
    except click.Abort:
        return 2
    except click.UsageError as e:
        click.echo(f"usage error: {e.format_message()}", err=True)
        return 1
    except click.ClickException as e:
        click.echo(f"error: {e.format_message()}", err=True)
        return 2
    except (DataError, ValueError, OSError, RuntimeError) as e:
        click.echo(f"error: {e}", err=True)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
