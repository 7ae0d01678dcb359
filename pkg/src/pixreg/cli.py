"""Command-line entry point: ``python -m pixreg <command> ...``.

Every command writes only into its run directory. Exit codes: 0 done,
1 usage error, 2 data or file format error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time

import numpy as np
import scipy

from . import __version__, analysis, attacks, datasets, simreg, trainer
from .nn import NonFiniteGradient, load_model, save_model
from .nn.serialize import ModelFormatError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    return vals


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _write(path, data):
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(path, mode) as fh:
        fh.write(data)
    return path


def _versions():
    return {"pixreg": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_manifest(run_dir, command, config_hash, files, seeds, timings, extra=None):
    """manifest.json lists every output with its sha256; timings live only here."""
    entries = {name: {"path": name, "sha256": _sha256(os.path.join(run_dir, name))}
               for name in sorted(files)}
    manifest = {"command": command, "config_hash": config_hash, "files": entries,
                "seeds": seeds, "timings": timings, "versions": _versions()}
    manifest.update(extra or {})
    _write(os.path.join(run_dir, "manifest.json"), json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


def _read_config(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        return trainer.ExperimentConfig.from_text(fh.read())


def _load_net(path):
    with open(path, "rb") as fh:
        return load_model(fh.read(), with_extras=True)


def _eval_images(name, split, data_dir, n, net=None):
    ds = datasets.load_dataset(name, split, data_dir)
    if n and n < len(ds):
        ds = ds.subset(np.arange(n), f"first:{n}")
    if net is not None and tuple(ds.shape) != tuple(net.arch.input_shape):
        raise datasets.DatasetError(f"dataset images are {tuple(ds.shape)} but the model expects "
                                    f"{tuple(net.arch.input_shape)}")
    return ds


# --- train -------------------------------------------------------------------

def run_training(cfg, out_root=None, quiet=False, argv=None):
    """Train and populate ``<out_root>/<config hash>/``; returns (run_dir, result)."""
    h = cfg.run_hash()
    run_dir = os.path.join(out_root or cfg.output_dir, h)
    os.makedirs(run_dir, exist_ok=True)
    t0 = time.time()
    result = trainer.train(cfg)
    t_train = time.time() - t0
    _write(os.path.join(run_dir, "config.txt"), cfg.to_text())
    _write(os.path.join(run_dir, "model.tpnt"),
           save_model(result.net, {"gamma_logits": result.mixer.logits.data}))
    _write(os.path.join(run_dir, "log.jsonl"), result.log_lines())
    final = result.epochs[-1]
    summary = {"test_acc": final["test_acc"], "train_acc": final["train_acc"], "gamma": final["gamma"]}
    _write(os.path.join(run_dir, "summary.json"), json.dumps(summary, sort_keys=True, indent=1) + "\n")
    write_manifest(run_dir, "train", h, ["config.txt", "model.tpnt", "log.jsonl", "summary.json"],
                   {"seed": cfg.seed, "streams": [[cfg.seed, k] for k in (1, 2, 3)],
                    "regularization_selection": cfg.seed},
                   {"train_seconds": round(t_train, 3)}, {"argv": argv})
    if not quiet:
        print(f"run {run_dir}")
        print(f"clean test accuracy {final['test_acc']:.4f}")
        print("gamma " + " ".join(f"{g:.4f}" for g in final["gamma"]))
    return run_dir, result


def cmd_train(args):
    cfg = _read_config(args.config)
    run_training(cfg, args.output_dir, argv=args.argv)
    return EXIT_OK


# --- attack ------------------------------------------------------------------

def attack_report(net, ds, args, substitute=None):
    images, labels = ds.images, ds.labels
    fam = args.family
    if fam in attacks.NOISE_FAMILIES:
        return attacks.noise_attack(net, images, labels, fam, args.eps, seed=args.seed, c=args.c)
    if fam == "fgsm":
        return attacks.transfer_attack(substitute if substitute is not None else net, net,
                                       images, labels, args.eps)
    if fam == "boundary":
        return attacks.boundary_report(net, images, labels, steps=args.steps,
                                       repeats=args.repeats, seed=args.seed)
    raise UsageError(f"unknown attack family {fam!r}")


def cmd_attack(args):
    net, _ = _load_net(args.model)
    substitute = None
    if args.substitute:
        substitute, _ = _load_net(args.substitute)
    ds = _eval_images(args.dataset, args.split, args.data_dir, args.n_images, net)
    run_dir = os.path.dirname(os.path.abspath(args.model))
    t0 = time.time()
    report = attack_report(net, ds, args, substitute)
    report.params.update({"dataset": args.dataset, "split": args.split,
                          "model_sha256": _sha256(args.model)})
    if substitute is not None:
        report.params["substitute_sha256"] = _sha256(args.substitute)
    tag = hashlib.sha256(json.dumps(report.params, sort_keys=True).encode()
                         + repr(report.eps).encode()).hexdigest()[:8]
    name = f"attack-{args.family}-{tag}.json"
    _write(os.path.join(run_dir, name), report.to_json())
    _append_manifest(run_dir, name, {"attack_seconds": round(time.time() - t0, 3)}, args.argv)
    print(os.path.join(run_dir, name))
    if report.accuracy:
        print("accuracy " + " ".join(f"{e:g}:{a:.4f}" for e, a in zip(report.eps, report.accuracy)))
    if report.score is not None:
        print(f"boundary score {report.score:.6g}")
    return EXIT_OK


def _append_manifest(run_dir, name, timings, argv):
    path = os.path.join(run_dir, "manifest.json")
    manifest = {"command": "attack", "config_hash": None, "files": {}, "seeds": {},
                "timings": {}, "versions": _versions()}
    if os.path.exists(path):
        with open(path) as fh:
            manifest = json.load(fh)
    manifest["files"][name] = {"path": name, "sha256": _sha256(os.path.join(run_dir, name)), "argv": argv}
    manifest["timings"][name] = timings
    _write(path, json.dumps(manifest, sort_keys=True, indent=1) + "\n")


# --- sweep -------------------------------------------------------------------

def cmd_sweep(args):
    if not args.alpha or not args.th or not args.seeds:
        raise UsageError("sweep needs non-empty --alpha, --th and --seeds lists")
    if not any(e == 0 for e in args.eps) or args.eps_high not in args.eps:
        raise UsageError("--eps must contain 0 and --eps-high")
    base = _read_config(args.config)
    key = json.dumps([base.run_hash(), args.alpha, args.th, args.seeds, args.family, args.eps,
                      args.eps_high, args.a0], sort_keys=True)
    sweep_dir = os.path.join(args.output_dir or base.output_dir,
                             "sweep-" + hashlib.sha256(key.encode()).hexdigest()[:12])
    runs_dir = os.path.join(sweep_dir, "runs")
    os.makedirs(runs_dir, exist_ok=True)
    t0 = time.time()

    def curve(cfg):
        run_dir, result = run_training(cfg, runs_dir, quiet=True)
        test = trainer.load_splits(cfg)[1]
        rep = attacks.noise_attack(result.net, test.images, test.labels, args.family, args.eps, seed=cfg.seed)
        return rep.accuracy

    baseline = {s: curve(base.replace(alpha=0.0, seed=s)) for s in args.seeds}
    u = np.mean([baseline[s] for s in args.seeds], axis=0)
    points = []
    for a in args.alpha:
        for th in args.th:
            r = np.mean([curve(base.replace(alpha=a, th=th, seed=s)) for s in args.seeds], axis=0)
            points.append(analysis.tradeoff(list(r), list(u), args.eps, args.eps_high, args.a0, a, th))
    _write(os.path.join(sweep_dir, "tradeoff.json"), analysis.tradeoff_json(points))
    write_manifest(sweep_dir, "sweep", base.run_hash(), ["tradeoff.json"], {"seeds": args.seeds},
                   {"sweep_seconds": round(time.time() - t0, 3)},
                   {"family": args.family, "eps": args.eps, "eps_high": args.eps_high, "argv": args.argv})
    for p in points:
        print(f"alpha={p.alpha:g} th={p.th:g} R0/U0={p.clean_ratio} RD/UD={p.distorted_ratio} "
              f"acceptable={p.acceptable}")
    return EXIT_OK


# --- analyze -----------------------------------------------------------------

def cmd_analyze(args):
    os.makedirs(args.out_dir, exist_ok=True)
    outputs = {}
    if args.kind == "perturbation":
        net, _ = _load_net(args.model)
        ds = _eval_images(args.dataset, args.split, args.data_dir, args.n_images, net)
        decide = attacks.net_decision(net)
        power, used = None, 0
        for i in range(len(ds)):
            if decide(ds.images[i]) != ds.labels[i]:
                continue
            res = attacks.boundary_attack(decide, ds.images[i], int(ds.labels[i]),
                                          steps=args.steps, seed=args.seed + i)
            if res.failed:
                continue
            for ch in res.perturbation:
                p = analysis.fourier_power(ch)
                power = p if power is None else power + p
            used += 1
        if not used:
            raise datasets.DatasetError("no image could be attacked")
        power /= used
        profile, counts = analysis.radial_spectrum(power)
        outputs["perturbation_radial.csv"] = analysis.profile_csv(profile, counts)
        outputs["perturbation_power.csv"] = analysis.matrix_csv(power)
    elif args.kind == "corruption":
        ds = _eval_images(args.dataset, args.split, args.data_dir, args.n_images)
        spec = attacks.NoiseSpec(args.family, args.eps, args.seed)
        mag, logv = analysis.corruption_spectrum(ds.images, lambda x: attacks.apply_noise(x, spec))
        profile, counts = analysis.radial_spectrum(mag)
        outputs["corruption_spectrum.csv"] = analysis.matrix_csv(mag)
        outputs["corruption_log1p.csv"] = analysis.matrix_csv(logv)
        outputs["corruption_radial.csv"] = analysis.profile_csv(profile, counts)
        outputs["corruption_category.json"] = json.dumps(
            {"family": args.family, "eps": args.eps,
             "category": analysis.frequency_category(mag)}, sort_keys=True) + "\n"
    else:
        net, extras = _load_net(args.model)
        ds = _eval_images(args.dataset, args.split, args.data_dir, args.n_images, net)
        s_pix = simreg.pixel_similarity(ds.images, center=args.center)
        _, feats = net.forward(ds.images)
        logits = extras.get("gamma_logits", np.zeros(len(feats), np.float32)).astype(np.float64)
        gam = np.exp(logits - logits.max())
        gam /= gam.sum()
        s_cnn = sum(g * simreg.layer_similarity(f.data, l) for l, (g, f) in enumerate(zip(gam, feats)))
        per_layer = [analysis.sim_correlation(s_pix, simreg.layer_similarity(f.data, l))
                     for l, f in enumerate(feats)]
        outputs["correlation.json"] = json.dumps(
            {"pearson_mixed": analysis.sim_correlation(s_pix, s_cnn), "pearson_per_layer": per_layer,
             "gamma": gam.tolist(), "n_images": len(ds)}, sort_keys=True, indent=1) + "\n"
    for name, text in outputs.items():
        _write(os.path.join(args.out_dir, name), text)
        print(os.path.join(args.out_dir, name))
    return EXIT_OK


# --- sim-target / dataset-info ---------------------------------------------------

def cmd_sim_target(args):
    ds = datasets.load_dataset(args.dataset, args.split, args.data_dir)
    reg = datasets.select_regularization_images(ds, args.n, args.seed)
    s = simreg.pixel_similarity(reg.images, center=args.center)
    target = simreg.make_target(s, args.th, args.eps_clamp, args.mode, args.th2)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    _write(args.out, target.to_bytes())
    frac = {k: float(v) for k, v in zip(("plus", "minus", "zero"), _target_fractions(target))}
    print(json.dumps({"path": args.out, "n": target.n, "pairs": target.num_pairs(), **frac}, sort_keys=True))
    return EXIT_OK


def _target_fractions(target):
    iu = np.triu_indices(target.n, 1)
    v, m = target.values[iu], target.mask[iu]
    v = v[m]
    if not v.size:
        return 0.0, 0.0, 0.0
    return (v > 0).mean(), (v < 0).mean(), (v == 0).mean()


def dataset_info(ds):
    images = np.ascontiguousarray(ds.images)
    counts = np.bincount(ds.labels, minlength=ds.num_classes)
    return {"count": len(ds), "shape": list(ds.shape), "num_classes": ds.num_classes,
            "class_counts": counts.tolist(), "pixel_mean": float(images.mean(dtype=np.float64)),
            "pixel_std": float(images.std(dtype=np.float64)),
            "images_sha256": hashlib.sha256(images.tobytes()).hexdigest(),
            "labels_sha256": hashlib.sha256(np.ascontiguousarray(ds.labels).tobytes()).hexdigest(),
            "provenance": list(ds.provenance)}


def cmd_dataset_info(args):
    ds = datasets.load_dataset(args.dataset, args.split, args.data_dir)
    print(json.dumps(dataset_info(ds), sort_keys=True, indent=1))
    return EXIT_OK


# --- wiring ------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="pixreg", description="Pixel-similarity regularization experiments.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train", help="train one model from a config file")
    t.add_argument("config")
    t.add_argument("--output-dir", default=None, help="overrides output_dir from the config")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attack", help="attack a saved model")
    a.add_argument("model")
    a.add_argument("--family", required=True,
                   choices=list(attacks.NOISE_FAMILIES) + ["fgsm", "boundary"])
    a.add_argument("--eps", type=_floats, default=[0.0, 0.05, 0.1])
    a.add_argument("--c", type=float, default=1.0, help="salt & pepper scale")
    a.add_argument("--substitute", default=None, help="FGSM substitute model (default: white-box)")
    a.add_argument("--steps", type=int, default=50)
    a.add_argument("--repeats", type=int, default=5)
    a.add_argument("--n-images", type=int, default=1000)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--dataset", default="mnist")
    a.add_argument("--split", default="test")
    a.add_argument("--data-dir", default="data")
    a.set_defaults(func=cmd_attack)

    s = sub.add_parser("sweep", help="trade-off plane over (alpha, th)")
    s.add_argument("config")
    s.add_argument("--alpha", type=_floats, required=True)
    s.add_argument("--th", type=_floats, required=True)
    s.add_argument("--seeds", type=_ints, default=[0])
    s.add_argument("--family", choices=attacks.NOISE_FAMILIES, default="gaussian")
    s.add_argument("--eps", type=_floats, default=[0.0, 0.1, 0.3])
    s.add_argument("--eps-high", type=float, default=analysis.EPS_HIGH_RANDOM)
    s.add_argument("--a0", type=float, default=analysis.A0)
    s.add_argument("--output-dir", default=None)
    s.set_defaults(func=cmd_sweep)

    z = sub.add_parser("analyze", help="Fourier and similarity-correlation analyses")
    z.add_argument("kind", choices=["perturbation", "corruption", "correlation"])
    z.add_argument("--model", default=None)
    z.add_argument("--out-dir", required=True)
    z.add_argument("--family", choices=attacks.NOISE_FAMILIES, default="gaussian")
    z.add_argument("--eps", type=float, default=0.1)
    z.add_argument("--steps", type=int, default=2000)
    z.add_argument("--center", choices=simreg.CENTERING, default="image")
    z.add_argument("--n-images", type=int, default=100)
    z.add_argument("--seed", type=int, default=0)
    z.add_argument("--dataset", default="mnist")
    z.add_argument("--split", default="test")
    z.add_argument("--data-dir", default="data")
    z.set_defaults(func=cmd_analyze)

    g = sub.add_parser("sim-target", help="precompute a similarity target file")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--th", type=float, default=0.2)
    g.add_argument("--th2", type=float, default=None)
    g.add_argument("--mode", choices=list(simreg.TARGET_MODES) + ["double"], default="full")
    g.add_argument("--center", choices=simreg.CENTERING, default="dataset")
    g.add_argument("--eps-clamp", type=float, default=simreg.EPS_CLAMP)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dataset", default="mnist")
    g.add_argument("--split", default="train")
    g.add_argument("--data-dir", default="data")
    g.set_defaults(func=cmd_sim_target)

    d = sub.add_parser("dataset-info", help="summarize a dataset as JSON")
    d.add_argument("dataset")
    d.add_argument("--split", default="train")
    d.add_argument("--data-dir", default="data")
    d.set_defaults(func=cmd_dataset_info)
    return p


def main(argv=None):
    try:
        argv = list(sys.argv[1:] if argv is None else argv)
        args = build_parser().parse_args(argv)
        args.argv = argv
        if args.command == "analyze" and args.kind != "corruption" and not args.model:
            raise UsageError(f"analyze {args.kind} needs --model")
        return args.func(args)
    except (UsageError, trainer.ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, datasets.DatasetError, ModelFormatError, simreg.SimilarityError,
            attacks.AttackError, analysis.AnalysisError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (trainer.NonFiniteLoss, NonFiniteGradient, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
