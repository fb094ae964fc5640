"""Command-line entry point.

Commands: toygen, train, score, eval, fig1, render, correct. Every command
writes a config echo (JSON) into its output directory so runs can be
reproduced exactly; CSV outputs are byte-stable given the same seed.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import json
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from . import evalkit, pipeline, scoring, toy, training, weights
from .evalkit import EvalReport, LayoutError, PrepareRecipe
from .tensor import ShapeError
from .weights import WeightFormatError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def load_config(path: str | None, allowed: set[str]) -> dict:
    """Strict JSON config: unknown keys are an error, never ignored."""
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise click.UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise click.UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise click.UsageError(f"config file {path} must hold a JSON object")
    unknown = set(cfg) - allowed
    if unknown:
        raise click.UsageError(
            f"unknown config keys: {', '.join(sorted(unknown))} "
            f"(allowed: {', '.join(sorted(allowed))})"
        )
    return cfg


def merge(cfg: dict, **flags) -> dict:
    """File values first, then any flag the user actually set."""
    out = dict(cfg)
    for key, value in flags.items():
        if value is not None:
            out[key] = value
    return out


def echo_config(out_dir: Path, command: str, settings: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **settings}
    (out_dir / "config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )


def _toy_spec(settings: dict) -> toy.ToySpec:
    return toy.ToySpec(
        sigma_n=float(settings.get("sigma_n", 0.0285)),
        sigma_a=float(settings.get("sigma_a", 0.0570)),
        psi=float(settings.get("psi", 5.0)),
        side=int(settings.get("side", 128)),
        sigma_e=float(settings.get("sigma_e", 0.00285)),
    )


@click.group()
def cli():
    """Feature-augmented VAE anomaly detection toolkit."""


# ---------------------------------------------------------------------------
# toygen
# ---------------------------------------------------------------------------

TOYGEN_KEYS = {"sigma_n", "sigma_a", "psi", "side", "sigma_e",
               "n_normal", "n_anomaly", "seed"}


@cli.command()
@click.option("--config", "config_path", type=str, default=None)
@click.option("--preset", type=click.Choice(["paper"]), default=None,
              help="Named parameter set for the synthetic distributions.")
@click.option("--side", type=int, default=None)
@click.option("--n-normal", type=int, default=None)
@click.option("--n-anomaly", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=str, required=True)
def toygen(config_path, preset, side, n_normal, n_anomaly, seed, out):
    """Generate a flat-layout synthetic dataset."""
    cfg = load_config(config_path, TOYGEN_KEYS)
    settings = merge(cfg, side=side, n_normal=n_normal, n_anomaly=n_anomaly, seed=seed)
    if preset == "paper":
        settings.pop("sigma_n", None)
        settings.pop("sigma_a", None)
        settings.pop("psi", None)
    spec = _toy_spec(settings)
    out_dir = Path(out)
    n_norm = int(settings.get("n_normal", 200))
    n_anom = int(settings.get("n_anomaly", 0))
    run_seed = int(settings.get("seed", 0))
    evalkit.export_toy_dataset(spec, out_dir, n_norm, n_anom, seed=run_seed)
    echo_config(out_dir, "toygen", {
        "sigma_n": spec.sigma_n, "sigma_a": spec.sigma_a, "psi": spec.psi,
        "side": spec.side, "sigma_e": spec.sigma_e,
        "n_normal": n_norm, "n_anomaly": n_anom, "seed": run_seed,
    })
    click.echo(f"wrote {n_norm} normal / {n_anom} anomalous images to {out_dir}")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_KEYS = {"mode", "backbone", "ablation", "weights", "epochs", "batch_size",
              "lr", "seed", "latent_dim", "channel_scale", "input_size",
              "recipe", "images_per_epoch"}


@cli.command()
@click.option("--config", "config_path", type=str, default=None)
@click.option("--data", type=str, required=True, help="Flat-layout training directory.")
@click.option("--mode", type=click.Choice(["vanilla", "favae"]), default=None)
@click.option("--backbone",
              type=click.Choice(["vgg16", "resnet18", "random", "encoder", "none"]),
              default=None)
@click.option("--ablation", type=click.Choice([f"m{i}" for i in range(1, 7)]),
              default=None)
@click.option("--weights", "weights_path", type=str, default=None,
              help="FVW1 weight pack for pretrained backbones.")
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--latent-dim", type=int, default=None)
@click.option("--channel-scale", type=float, default=None)
@click.option("--out", type=str, required=True)
def train(config_path, data, mode, backbone, ablation, weights_path, epochs,
          batch_size, lr, seed, latent_dim, channel_scale, out):
    """Train a model on normal samples and persist the run."""
    cfg = load_config(config_path, TRAIN_KEYS)
    settings = merge(cfg, mode=mode, backbone=backbone, ablation=ablation,
                     weights=weights_path, epochs=epochs, batch_size=batch_size,
                     lr=lr, seed=seed, latent_dim=latent_dim,
                     channel_scale=channel_scale)
    backbone_map = {"random": "random_vgg16", "encoder": "own_encoder"}
    bk = settings.get("backbone")
    bk = backbone_map.get(bk, bk)
    try:
        resolved = pipeline.resolve_mode(settings.get("mode"), settings.get("ablation"))
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc

    samples = [s for s in evalkit.ingest(data, "flat") if s.label == "normal"]
    if not samples:
        raise LayoutError(f"no normal training images found in {data}")
    side = samples[0].image.shape[0]
    run = {
        "mode": resolved,
        "backbone": None if bk in (None, "none") else bk,
        "input_size": list(settings.get("input_size", (3, side, side))),
        "latent_dim": int(settings.get("latent_dim", 100)),
        "channel_scale": float(settings.get("channel_scale", 1.0)),
        "seed": int(settings.get("seed", 0)),
        "weights": settings.get("weights"),
    }
    pack = None
    if resolved == "pretrained_frozen" or (run["backbone"] in ("vgg16", "resnet18")):
        if not run["weights"]:
            raise click.UsageError("pretrained backbones need --weights <pack.fvw>")
        pack = weights.load_weights(run["weights"])
    model, fx = pipeline.build(run, pack=pack)
    batch = pipeline.samples_to_batch(samples, run["input_size"])
    tc = training.TrainConfig(
        epochs=int(settings.get("epochs", 100)),
        batch_size=int(settings.get("batch_size", 16)),
        lr=float(settings.get("lr", 1e-4)),
        seed=run["seed"],
    )
    history = training.train(model, fx, batch, tc)
    out_dir = Path(out)
    pipeline.save_run(out_dir, run, model)
    training.history_to_csv(history, out_dir / pipeline.LOSS_FILE)
    echo_config(out_dir, "train", {**run, "data": str(data),
                                   "epochs": tc.epochs, "batch_size": tc.batch_size,
                                   "lr": tc.lr})
    click.echo(f"trained {tc.epochs} epochs; final loss "
               f"{history[-1]['total']:.4f}; run saved to {out_dir}")


# ---------------------------------------------------------------------------
# score
# ---------------------------------------------------------------------------

SCORE_KEYS = {"kind", "seed"}


@cli.command()
@click.option("--config", "config_path", type=str, default=None)
@click.option("--run", "run_dir", type=str, required=True)
@click.option("--data", type=str, required=True)
@click.option("--kind", type=click.Choice(["favae", "elbo", "typicality",
                                           "classic-pixel-max"]), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=str, required=True)
def score(config_path, run_dir, data, kind, seed, out):
    """Score a dataset with a trained run; writes CSV plus map images."""
    cfg = load_config(config_path, SCORE_KEYS)
    settings = merge(cfg, kind=kind, seed=seed)
    kind = settings.get("kind", "favae")
    run_seed = int(settings.get("seed", 0))
    model, fx, run = pipeline.load_run(run_dir)
    samples = evalkit.ingest(data, "flat")
    if not samples:
        raise LayoutError(f"no images found in {data}")
    batch = pipeline.samples_to_batch(samples, run["input_size"])
    ids = [Path(s.path).stem for s in samples]
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if kind == "favae":
        maps = scoring.favae_map(batch, model, fx)
        records = [scoring.ScoreRecord(i, scoring.image_score(m), "favae")
                   for i, m in zip(ids, maps)]
        population = np.concatenate([m.values.ravel() for m in maps])
        for img_id, m in zip(ids, maps):
            np.save(out_dir / f"{img_id}_map.npy", m.values)
            evalkit.render(m.values, "equalized_jet",
                           out_dir / f"{img_id}_map.png", population=population)
    else:
        records = scoring.score_batch(batch, kind, model, extractor=fx,
                                      ids=ids, seed=run_seed)
    scoring.records_to_csv(records, out_dir / "scores.csv")
    echo_config(out_dir, "score", {"run": str(run_dir), "data": str(data),
                                   "kind": kind, "seed": run_seed})
    click.echo(f"scored {len(records)} images ({kind}) into {out_dir}")


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

EVAL_KEYS = {"seed", "bins"}


@cli.command("eval")
@click.option("--config", "config_path", type=str, default=None)
@click.option("--run", "run_dir", type=str, required=True)
@click.option("--data", type=str, required=True,
              help="Flat layout with sidecar masks for anomalous images.")
@click.option("--seed", type=int, default=None)
@click.option("--out", type=str, required=True)
def eval_cmd(config_path, run_dir, data, seed, out):
    """Image- and pixel-level AUROC report with histograms and figures."""
    cfg = load_config(config_path, EVAL_KEYS)
    settings = merge(cfg, seed=seed)
    bins = int(settings.get("bins", 40))
    model, fx, run = pipeline.load_run(run_dir)
    samples = evalkit.ingest(data, "flat")
    if not samples:
        raise LayoutError(f"no images found in {data}")
    batch = pipeline.samples_to_batch(samples, run["input_size"])
    maps = scoring.favae_map(batch, model, fx)
    scores = np.array([scoring.image_score(m) for m in maps])
    labels = np.array([s.label == "anomalous" for s in samples])
    image_auc = None
    if labels.any() and not labels.all():
        image_auc = evalkit.auroc(scores[labels], scores[~labels])
    pixel_auc = None
    masked = [(m.values, s.mask) for m, s in zip(maps, samples)]
    if any(s.mask is not None and s.mask.any() for s in samples):
        h, w = maps[0].values.shape
        masks = []
        for values, mask in masked:
            if mask is None:
                masks.append(np.zeros((h, w), dtype=bool))
            elif mask.shape != (h, w):
                masks.append(np.asarray(evalkit._resize_float(
                    mask.astype(float), h)) > 0.5)
            else:
                masks.append(mask)
        pixel_auc = evalkit.pixel_auroc([m.values for m in maps], masks)
    report = EvalReport(image_auc, pixel_auc,
                        config={"run": str(run_dir), "data": str(data),
                                "bins": bins, **run})
    edges = np.histogram_bin_edges(scores, bins=bins)
    if labels.any():
        report.add_histogram("anomalous", scores[labels], edges=edges)
    if (~labels).any():
        report.add_histogram("normal", scores[~labels], edges=edges)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.to_json(out_dir / "report.json")
    report.histograms_to_csv(out_dir / "histograms.csv")
    _histogram_figure(report, out_dir / "histograms.png",
                      "whole-image anomaly score")
    echo_config(out_dir, "eval", {"run": str(run_dir), "data": str(data),
                                  "bins": bins, "seed": int(settings.get("seed", 0))})
    click.echo(f"image AUROC: {image_auc}  pixel AUROC: {pixel_auc}")


def _histogram_figure(report: EvalReport, path, xlabel: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for name in sorted(report.histograms):
        h = report.histograms[name]
        edges = np.asarray(h["edges"])
        centers = 0.5 * (edges[:-1] + edges[1:])
        ax.step(centers, h["counts"], where="mid", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# fig1
# ---------------------------------------------------------------------------

FIG1_KEYS = {"n", "side", "seed", "bins", "score"}


@cli.command()
@click.option("--config", "config_path", type=str, default=None)
@click.option("--score", "score_kind",
              type=click.Choice(["analytic-loglik", "typicality", "favae"]),
              default=None)
@click.option("--run", "run_dir", type=str, default=None,
              help="Trained run directory (favae score only).")
@click.option("--n", type=int, default=None)
@click.option("--side", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=str, required=True)
def fig1(config_path, score_kind, run_dir, n, side, seed, out):
    """Three-distribution experiment: normal vs anomaly vs shuffled anomaly."""
    cfg = load_config(config_path, FIG1_KEYS)
    settings = merge(cfg, score=score_kind, n=n, side=side, seed=seed)
    kind = settings.get("score", "analytic-loglik")
    n = int(settings.get("n", 200))
    side = int(settings.get("side", 128))
    run_seed = int(settings.get("seed", 0))
    bins = int(settings.get("bins", 40))
    spec = toy.ToySpec(side=side)
    normal = toy.sample_normal(spec, n, seed=run_seed)
    anom = toy.sample_anomaly(spec, n, seed=run_seed + 1)
    shuf = toy.shuffle_pixels(anom, seed=run_seed + 2)
    if kind == "favae":
        if run_dir is None:
            raise click.UsageError("--score favae needs --run <trained run>")
        model, fx, run = pipeline.load_run(run_dir)
        channels = run["input_size"][0]

        def score_set(images):
            batch = pipeline.toy_batch_to_input(images, channels)
            return np.array([scoring.image_score(m)
                             for m in scoring.favae_map(batch, model, fx)])
    else:
        vae = toy.AnalyticVae(spec)
        fn = (scoring.loglik_score if kind == "analytic-loglik"
              else scoring.typicality_score)

        def score_set(images):
            return np.array([fn(img, vae) for img in images])

    sets = {"normal": score_set(normal), "anomaly": score_set(anom),
            "shuffled": score_set(shuf)}
    summary = {"score": kind, "n": n, "side": side, "seed": run_seed}
    for name, vals in sets.items():
        summary[f"mean_{name}"] = float(vals.mean())
        summary[f"median_{name}"] = float(np.median(vals))
    # orientation: higher favae score = more anomalous; others = more normal
    if kind == "favae":
        summary["auroc_normal_vs_anomaly"] = evalkit.auroc(
            sets["anomaly"], sets["normal"])
    else:
        summary["auroc_normality"] = evalkit.auroc(sets["normal"], sets["anomaly"])
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    all_scores = np.concatenate(list(sets.values()))
    edges = np.histogram_bin_edges(all_scores, bins=bins)
    report = EvalReport(None, None, config=summary)
    for name, vals in sets.items():
        report.add_histogram(name, vals, edges=edges)
    report.histograms_to_csv(out_dir / "histograms.csv")
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _histogram_figure(report, out_dir / "histograms.png", f"{kind} score")
    echo_config(out_dir, "fig1", summary)
    click.echo(json.dumps(summary, sort_keys=True))


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------


@cli.command("render")
@click.argument("maps", nargs=-1, required=True,
                type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", type=click.Choice(["equalized_jet", "gray16"]),
              default="equalized_jet")
@click.option("--out", type=str, required=True)
def render_cmd(maps, mode, out):
    """Render saved anomaly maps (.npy) against their pooled population."""
    arrays = [np.load(p) for p in maps]
    population = np.concatenate([a.ravel() for a in arrays])
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path, arr in zip(maps, arrays):
        target = out_dir / (Path(path).stem + ".png")
        evalkit.render(arr, mode, target, population=population)
    echo_config(out_dir, "render", {"mode": mode, "maps": [str(m) for m in maps]})
    click.echo(f"rendered {len(arrays)} maps to {out_dir}")


# ---------------------------------------------------------------------------
# correct
# ---------------------------------------------------------------------------

CORRECT_KEYS = {"lam", "steps", "step_size"}


@cli.command("correct")
@click.option("--config", "config_path", type=str, default=None)
@click.option("--run", "run_dir", type=str, required=True)
@click.option("--image", "image_path", type=str, required=True)
@click.option("--lam", type=float, default=None)
@click.option("--steps", type=int, default=None)
@click.option("--step-size", type=float, default=None)
@click.option("--out", type=str, required=True)
def correct_cmd(config_path, run_dir, image_path, lam, steps, step_size, out):
    """Gradient-corrected reconstruction of a single image."""
    cfg = load_config(config_path, CORRECT_KEYS)
    settings = merge(cfg, lam=lam, steps=steps, step_size=step_size)
    model, fx, run = pipeline.load_run(run_dir)
    sample = evalkit.LabeledSample(evalkit._read_image(Path(image_path)),
                                   "normal", path=image_path)
    batch = pipeline.samples_to_batch([sample], run["input_size"])
    corrected, trace = training.correct(
        batch, model, fx,
        lam=float(settings.get("lam", 1.0)),
        steps=int(settings.get("steps", 50)),
        step_size=float(settings.get("step_size", 1e-3)),
    )
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    img = corrected[0].transpose(1, 2, 0)
    if img.shape[2] == 1:
        img = img[:, :, 0]
    evalkit.write_image(img, out_dir / "corrected.png")
    with open(out_dir / "objective.csv", "w", newline="") as fh:
        fh.write("step,objective\n")
        for i, v in enumerate(trace):
            fh.write(f"{i},{v:.10g}\n")
    echo_config(out_dir, "correct", {"run": str(run_dir), "image": str(image_path),
                                     **{k: settings.get(k) for k in CORRECT_KEYS}})
    click.echo(f"correction finished; objective {trace[0]:.4f} -> {trace[-1]:.4f}"
               if trace else "no steps requested; image copied unchanged")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return EXIT_OK
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        return EXIT_USAGE
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.Abort:
        return EXIT_USAGE
    except (LayoutError, FileNotFoundError, WeightFormatError, KeyError) as exc:
        click.echo(f"data error: {exc}", err=True)
        return EXIT_DATA
    except (FloatingPointError, ZeroDivisionError, ShapeError) as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        return EXIT_NUMERIC
    except ValueError as exc:
        click.echo(f"usage error: {exc}", err=True)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
