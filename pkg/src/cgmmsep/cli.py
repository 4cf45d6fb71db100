"""Batch command-line interface.

Subcommands: simulate | separate | infer-mono | train | evaluate | gradcheck.
Exit codes: 0 success, 1 usage/config error, 2 numeric failure, 3 I/O failure.
"""

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import avi, em, simbench
from .config import load_config
from .errors import (
    AudioIOError,
    CgmmsepError,
    CheckpointError,
    ConfigError,
    DimensionError,
    NumericError,
)
from .signal import (
    Spectrogram,
    Waveform,
    apply_masks,
    istft,
    read_wav,
    save_tensor,
    load_tensor,
    stft,
    write_wav,
)
from .spatial import build_templates

logger = logging.getLogger("cgmmsep")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _setup_logging():
    level = os.environ.get("CGMMSEP_LOG", "warning").upper()
    if level not in ("ERROR", "WARN", "WARNING", "INFO", "DEBUG"):
        level = "WARNING"
    if level == "WARN":
        level = "WARNING"
    logging.basicConfig(
        level=getattr(logging, level),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _build_parser():
    parser = _Parser(prog="cgmmsep", description=__doc__)
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument("--seed", type=int, help="override the base seed")
    parser.add_argument("--jobs", type=int, default=1, help="scene-level parallelism")
    parser.add_argument(
        "--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable; flags win over the file)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate seeded synthetic scenes")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-scenes", type=int, help="override [simulate].n_scenes")

    p = sub.add_parser("separate", help="EM separation of a multichannel WAV")
    p.add_argument("wav_in")
    p.add_argument("--out", required=True)
    p.add_argument("--init", choices=["directional", "network"], default="directional")
    p.add_argument("--checkpoint", help="mask network checkpoint (network init)")

    p = sub.add_parser("infer-mono", help="network-only monaural separation")
    p.add_argument("wav_in")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="unsupervised training of the mask network")
    p.add_argument("--manifest", required=True, help="CSV with a 'path' column")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", help="training log CSV (default: <out>.log.csv)")

    p = sub.add_parser("evaluate", help="score separated scenes against references")
    p.add_argument("--manifest", required=True)
    p.add_argument("--results", required=True, help="directory of per-scene outputs")
    p.add_argument("--out", help="metrics CSV (default: <results>/metrics.csv)")

    sub.add_parser("gradcheck", help="finite-difference check of the training gradients")
    return parser


# ---------------------------------------------------------------------------
# simulate


def _sample_azimuths(rng, n_sources, min_sep, max_sep):
    if n_sources == 1:
        return np.array([rng.uniform(0.0, 360.0)])
    if n_sources == 2:
        first = rng.uniform(0.0, 360.0)
        sep = rng.uniform(min_sep, max_sep)
        sign = 1.0 if rng.uniform() < 0.5 else -1.0
        return np.array([first, (first + sign * sep) % 360.0])
    for _ in range(1000):
        az = rng.uniform(0.0, 360.0, size=n_sources)
        pair_ok = all(
            simbench.circular_distance_deg(az[i], az[j]) >= min_sep
            for i in range(n_sources)
            for j in range(i + 1, n_sources)
        )
        if pair_ok:
            return az
    raise ConfigError("cannot satisfy the azimuth separation constraint")


def _make_scene(cfg, index, base_seed):
    sim = cfg["simulate"]
    rng = np.random.default_rng([base_seed, index])
    n_samples = int(round(sim["duration_s"] * sim["sample_rate"]))
    azimuths = _sample_azimuths(
        rng, sim["n_sources"], sim["min_separation_deg"], sim["max_separation_deg"]
    )
    sources = np.stack([
        simbench.random_source(
            rng, n_samples, sim["sample_rate"],
            kind=sim["source_kinds"][int(rng.integers(len(sim["source_kinds"])))],
        )
        for _ in range(sim["n_sources"])
    ])
    gains = np.concatenate(
        [[0.0], rng.uniform(-sim["level_range_db"], sim["level_range_db"],
                            size=sim["n_sources"] - 1)]
    )
    return simbench.Scene(
        sources=sources,
        azimuths_deg=azimuths,
        sample_rate=sim["sample_rate"],
        geometry=cfg.geometry(),
        snr_db=sim["snr_db"],
        source_gains_db=gains,
        noise_seed=int(rng.integers(2**31)),
    )


def _write_scene(cfg, index, base_seed, out_dir):
    scene = _make_scene(cfg, index, base_seed)
    stft_cfg = cfg.stft_config()
    if cfg["simulate"]["kind"] == "planewave":
        waveform, truth = simbench.mix_planewave(scene, stft_cfg)
    elif cfg["simulate"]["kind"] == "reverberant":
        rng = np.random.default_rng([base_seed, index, 7])
        room = np.array([6.0, 5.0, 3.0])
        positions = np.stack([
            rng.uniform([0.5, 0.5, 0.5], room - 0.5) for _ in range(scene.n_sources)
        ])
        waveform, truth = simbench.mix_reverberant(
            scene, room, positions, stft_cfg=stft_cfg
        )
    else:
        raise ConfigError(f"unknown simulate kind {cfg['simulate']['kind']!r}")

    scene_id = f"scene_{index:04d}"
    scene_dir = Path(out_dir) / scene_id
    scene_dir.mkdir(parents=True, exist_ok=True)
    mix_path = scene_dir / "mix.wav"
    write_wav(mix_path, waveform)
    ref_paths = []
    for k in range(scene.n_sources):
        ref_path = scene_dir / f"ref_{k:02d}.wav"
        write_wav(ref_path, Waveform(truth.reference_images[k], scene.sample_rate))
        ref_paths.append(str(ref_path))
    return {
        "scene_id": scene_id,
        "path": str(mix_path),
        "ref_paths": ";".join(ref_paths),
        "azimuths_deg": ";".join(f"{a:.3f}" for a in truth.azimuths_deg),
        "snr_db": f"{scene.snr_db:g}",
        "seed": f"{base_seed}",
    }


def cmd_simulate(cfg, args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_scenes = args.n_scenes if args.n_scenes is not None else cfg["simulate"]["n_scenes"]
    base_seed = args.seed if args.seed is not None else cfg["simulate"]["seed"]
    rows = []
    if args.jobs > 1 and n_scenes > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [
                pool.submit(_write_scene, cfg, i, base_seed, out_dir)
                for i in range(n_scenes)
            ]
            rows = [f.result() for f in futures]
    else:
        rows = [_write_scene(cfg, i, base_seed, out_dir) for i in range(n_scenes)]
    manifest = out_dir / "scenes.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=["scene_id", "path", "ref_paths", "azimuths_deg",
                        "snr_db", "seed"],
        )
        writer.writeheader()
        writer.writerows(rows)
    logger.info("wrote %d scenes under %s", n_scenes, out_dir)
    return EXIT_OK


# ---------------------------------------------------------------------------
# separate / infer-mono


def _em_separate(cfg, spec: Spectrogram, init_masks=None):
    geom = cfg.geometry()
    if spec.n_channels != geom.n_mics:
        raise ConfigError(
            f"input has {spec.n_channels} channels but the geometry defines "
            f"{geom.n_mics} microphones"
        )
    tpl = build_templates(
        geom, cfg.grid(), spec.n_bins, spec.sample_rate, cfg["em"]["diag_loading"]
    )
    if init_masks is None:
        init = "directional"
        n_classes = cfg["em"]["directional_classes"]
    else:
        init = init_masks
        n_classes = init_masks.shape[2]
    result = em.run_em(
        spec.values,
        tpl,
        cfg.em_config(),
        init=init,
        n_classes=n_classes,
        dof=cfg.dof(geom.n_mics),
        prior_scale_numerator=cfg["em"]["prior_scale_numerator"],
    )
    n_sources = cfg["em"]["n_sources"]
    masks, kept = em.select_top_sources(result.masks, spec.values, n_sources)
    return result, masks, kept


def _write_separation(out_dir, spec, masks, result, kept, info):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for k, source_spec in enumerate(apply_masks(spec, masks)):
        write_wav(out_dir / f"src_{k:02d}.wav", istft(source_spec))
    save_tensor(out_dir / "masks.cgt", masks)
    if result is not None:
        save_tensor(out_dir / "doa.cgt", result.doa_posterior[kept])
        with open(out_dir / "elbo_trace.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "elbo"])
            for i, value in enumerate(result.elbo_trace):
                writer.writerow([i, f"{value:.6f}"])
    with open(out_dir / "info.json", "w") as fh:
        json.dump(info, fh, indent=2)


def cmd_separate(cfg, args):
    waveform = read_wav(args.wav_in)
    if waveform.n_channels < 2:
        raise ConfigError("EM separation needs a multichannel input (M >= 2)")
    spec = stft(waveform, cfg.stft_config())
    init_masks = None
    if args.init == "network":
        if not args.checkpoint:
            raise ConfigError("--init network requires --checkpoint")
        g, _, _, _ = avi.load_checkpoint(args.checkpoint)
        if g.n_bins != spec.n_bins:
            raise CheckpointError(
                f"checkpoint expects {g.n_bins} bins, input has {spec.n_bins}"
            )
        init_masks = g.forward(avi.log_magnitude_features(spec.values))
    result, masks, kept = _em_separate(cfg, spec, init_masks)
    info = {
        "method": "em-cgmm",
        "init": args.init,
        "n_iters": cfg["em"]["n_iters"],
        "selected_classes": [int(i) for i in kept],
    }
    _write_separation(args.out, spec, masks, result, kept, info)
    logger.info("wrote %d sources to %s", masks.shape[2], args.out)
    return EXIT_OK


def cmd_infer_mono(cfg, args):
    g, _, _, _ = avi.load_checkpoint(args.checkpoint)
    waveform = read_wav(args.wav_in)
    # multichannel input: use the first microphone only
    mono = Waveform(waveform.samples[:1], waveform.sample_rate)
    spec = stft(mono, cfg.stft_config())
    if g.n_bins != spec.n_bins:
        raise CheckpointError(
            f"checkpoint expects {g.n_bins} bins, input has {spec.n_bins}"
        )
    masks = g.forward(avi.log_magnitude_features(spec.values))
    info = {"method": "avi-cgmm", "init": "network", "selected_classes": []}
    _write_separation(args.out, spec, masks, None, None, info)
    logger.info("wrote %d sources to %s", masks.shape[2], args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _load_manifest(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise AudioIOError(f"cannot read manifest {path}: {exc}") from exc
    if not rows or "path" not in rows[0]:
        raise ConfigError(f"manifest {path} needs at least a 'path' column")
    return rows


def cmd_train(cfg, args):
    rows = _load_manifest(args.manifest)
    stft_cfg = cfg.stft_config()
    geom = cfg.geometry()
    mixtures = []
    for row in rows:
        try:
            waveform = read_wav(row["path"])
            mixtures.append(stft(waveform, stft_cfg).values)
        except (AudioIOError, DimensionError) as exc:
            logger.warning("skipping %s: %s", row["path"], exc)
    if not mixtures:
        raise AudioIOError("no readable training mixtures in the manifest")

    n_bins = mixtures[0].shape[1]
    sample_rate = cfg["simulate"]["sample_rate"]
    tpl = build_templates(geom, cfg.grid(), n_bins, sample_rate,
                          cfg["em"]["diag_loading"])
    train_cfg = cfg["training"]
    seed = args.seed if args.seed is not None else train_cfg["seed"]
    g = avi.ReferenceMaskNet(
        n_bins, cfg["em"]["n_sources"], context=train_cfg["context"],
        hidden=train_cfg["hidden"], seed=seed,
    )
    h = avi.SoftmaxLocalizer(cfg.grid().n_directions)
    ctx = avi.TrainingContext(
        tpl=tpl,
        optimizer=avi.Adam(g.n_parameters + h.n_parameters, lr=train_cfg["lr"]),
        omega_stop_gradient=train_cfg["omega_stop_gradient"],
    )

    log_path = args.log or f"{args.out}.log.csv"
    log_fh = open(log_path, "w", newline="")
    log_writer = csv.writer(log_fh)
    log_writer.writerow(["epoch", "step", "loss", "lr", "gradnorm"])

    def on_step(epoch, step, result):
        log_writer.writerow(
            [epoch, step, f"{result.loss:.8f}", f"{result.lr:.3e}",
             f"{result.grad_norm:.6e}"]
        )

    def on_epoch_end(epoch, loss, lr):
        avi.save_checkpoint(args.out, g, h, ctx.optimizer, epoch=epoch + 1)
        logger.info("epoch %d: loss %.6f lr %.3e", epoch, loss, lr)

    try:
        avi.fit_mask_network(
            mixtures, g, h, ctx,
            epochs=train_cfg["epochs"], batch_size=train_cfg["batch_size"],
            seed=seed, on_step=on_step, on_epoch_end=on_epoch_end,
        )
    finally:
        log_fh.close()
    logger.info("checkpoint written to %s", args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(cfg, args):
    rows = _load_manifest(args.manifest)
    results_dir = Path(args.results)
    out_path = Path(args.out) if args.out else results_dir / "metrics.csv"
    grid = cfg.grid()
    records = []
    failures = 0
    for row in rows:
        scene_id = row.get("scene_id", Path(row["path"]).parent.name)
        scene_dir = results_dir / scene_id
        record = {
            "scene_id": scene_id, "method": "", "init": "",
            "per_source_si_sdr": "", "mean_si_sdr": "", "doa_errors": "",
            "elbo_final": "",
        }
        ref_paths = [p for p in row.get("ref_paths", "").split(";") if p]
        est_paths = sorted(scene_dir.glob("src_*.wav"))
        if not est_paths or not ref_paths or len(est_paths) != len(ref_paths):
            logger.warning("missing or mismatched estimates for %s", scene_id)
            record["method"] = "missing"
            records.append(record)
            failures += 1
            continue
        refs = np.stack([read_wav(p).samples[0] for p in ref_paths])
        ests = np.stack([read_wav(p).samples[0] for p in est_paths])
        n = min(refs.shape[1], ests.shape[1])
        aligned = simbench.permutation_align(ests[:, :n], refs[:, :n])
        record["per_source_si_sdr"] = ";".join(
            f"{v:.3f}" for v in aligned.per_source_si_sdr
        )
        record["mean_si_sdr"] = f"{aligned.mean_si_sdr:.3f}"
        info_path = scene_dir / "info.json"
        if info_path.exists():
            with open(info_path) as fh:
                info = json.load(fh)
            record["method"] = info.get("method", "")
            record["init"] = info.get("init", "")
        doa_path = scene_dir / "doa.cgt"
        truth_az = [float(a) for a in row.get("azimuths_deg", "").split(";") if a]
        if doa_path.exists() and truth_az:
            doa = load_tensor(doa_path)
            errors = simbench.doa_error(doa, truth_az, grid)
            record["doa_errors"] = ";".join(f"{e:.2f}" for e in errors)
        trace_path = scene_dir / "elbo_trace.csv"
        if trace_path.exists():
            with open(trace_path, newline="") as fh:
                trace_rows = list(csv.DictReader(fh))
            if trace_rows:
                record["elbo_final"] = trace_rows[-1]["elbo"]
        records.append(record)

    scored = [float(r["mean_si_sdr"]) for r in records if r["mean_si_sdr"]]
    summary = []
    if scored:
        summary.append({
            "scene_id": "mean", "method": "", "init": "",
            "per_source_si_sdr": "", "mean_si_sdr": f"{np.mean(scored):.3f}",
            "doa_errors": "", "elbo_final": "",
        })
        summary.append({
            "scene_id": "std", "method": "", "init": "",
            "per_source_si_sdr": "", "mean_si_sdr": f"{np.std(scored):.3f}",
            "doa_errors": "", "elbo_final": "",
        })
    with open(out_path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=["scene_id", "method", "init", "per_source_si_sdr",
                        "mean_si_sdr", "doa_errors", "elbo_final"],
        )
        writer.writeheader()
        writer.writerows(records + summary)
    print(f"metrics written to {out_path}")
    return EXIT_IO if failures else EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(cfg, args):
    from .spatial import DirectionGrid

    rng = np.random.default_rng(0)
    geom = cfg.geometry()
    n_frames, n_bins = 6, 8
    grid = DirectionGrid(0.0, 30.0, 12)
    tpl = build_templates(geom, grid, n_bins, cfg["simulate"]["sample_rate"],
                          cfg["em"]["diag_loading"])
    x = (
        rng.standard_normal((n_frames, n_bins, geom.n_mics))
        + 1j * rng.standard_normal((n_frames, n_bins, geom.n_mics))
    )
    g = avi.ReferenceMaskNet(
        n_bins, cfg["em"]["n_sources"], context=cfg["training"]["context"],
        hidden=32, seed=0,
    )
    h = avi.SoftmaxLocalizer(grid.n_directions)
    report = avi.gradcheck(
        g, h, x, tpl,
        omega_stop_gradient=cfg["training"]["omega_stop_gradient"],
    )
    status = "PASS" if report.passed else "FAIL"
    print(
        f"gradcheck {status}: mask net max rel err "
        f"{report.max_rel_error_mask_net:.3e}, localizer max rel err "
        f"{report.max_rel_error_localizer:.3e} (tolerance {report.tolerance:.1e})"
    )
    return EXIT_OK if report.passed else EXIT_NUMERIC


# ---------------------------------------------------------------------------


def main(argv=None):
    _setup_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config, args.set)
        if args.command == "simulate":
            return cmd_simulate(cfg, args)
        if args.command == "separate":
            return cmd_separate(cfg, args)
        if args.command == "infer-mono":
            return cmd_infer_mono(cfg, args)
        if args.command == "train":
            return cmd_train(cfg, args)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, CheckpointError, DimensionError) as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        logger.error("%s", exc)
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AudioIOError, OSError) as exc:
        logger.error("%s", exc)
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
