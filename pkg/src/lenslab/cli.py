"""Single command-line entry point for every workflow.

Subcommands: basis, world, train, eval, verify, bench, ablate.  Each writes
its artifacts plus a manifest sidecar; re-running the manifest's argv
reproduces the artifacts bit-identically.

Exit codes: 0 success, 2 usage, 3 config, 4 data, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys
import time

import numpy as np

from . import __version__
from . import codec
from . import net as lens_net
from . import theory
from . import train as training
from . import world as toyworld
from .manifest import write_manifest
from .numerics import NumericalError, RngState, ShapeError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERICAL = 5


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def _load_json(path, kind: str) -> dict:
    try:
        with open(str(path)) as fh:
            return json.load(fh)
    except FileNotFoundError as e:
        raise DataError(f"{kind} file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON in {kind} file {path}: {e}") from e


def _dump_json(doc, path) -> None:
    with open(str(path), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def _finish(args, argv, config: dict, artifacts: list, started: float) -> int:
    manifest_path = str(artifacts[0]) + ".manifest.json"
    write_manifest(manifest_path, args.command, argv, config, artifacts,
                   __version__, time.perf_counter() - started)
    return EXIT_OK


# ---------------------------------------------------------------------------
# basis
# ---------------------------------------------------------------------------


def cmd_basis(args, argv) -> int:
    started = time.perf_counter()
    s = args.patch_size
    if args.samples:
        try:
            samples = np.load(args.samples)
        except FileNotFoundError as e:
            raise DataError(f"samples file not found: {args.samples}") from e
        if samples.ndim != 4:
            raise DataError(f"samples must be (n, C, H, W), got shape {samples.shape}")
        _, c, h, w = samples.shape
    else:
        c, h, w = args.channels, args.height, args.width
        rng = RngState(args.seed)
        geometry = _geometry(c, h, w, s)
        samples = codec.synthetic_latents(geometry, args.synthetic, rng,
                                          smoothness=args.smoothness)
    geometry = _geometry(c, h, w, s)
    basis = codec.extract_basis(list(samples), geometry, args.k)
    codec.save_basis(basis, args.out)
    config = {"patch_size": s, "k": args.k, "seed": args.seed,
              "n_samples": int(samples.shape[0]), "geometry": geometry.to_dict(),
              "source": args.samples or f"synthetic:{args.synthetic}"}
    return _finish(args, argv, config, [args.out, str(args.out) + ".json"], started)


def _geometry(c, h, w, s) -> codec.PatchGeometry:
    try:
        return codec.PatchGeometry(c, h, w, s)
    except ValueError as e:
        raise DataError(str(e)) from e


# ---------------------------------------------------------------------------
# world
# ---------------------------------------------------------------------------


def cmd_world(args, argv) -> int:
    started = time.perf_counter()
    if args.kind in ("lowfreq", "coeff"):
        if not args.basis:
            raise ConfigError(f"--basis is required for kind={args.kind}")
        basis = _load_basis(args.basis)
        world = toyworld.make_lowfreq_world(
            basis, args.j, seed=args.seed, feature_dim=args.feature_dim,
            hidden_dim=args.hidden_dim, proj_gain=args.proj_gain)
        toyworld.save_world(world, args.out, basis_file=args.basis)
    elif args.kind == "generic":
        geometry = _geometry(args.channels, args.height, args.width, args.patch_size)
        world = toyworld.make_generic_world(
            geometry, seed=args.seed, feature_dim=args.feature_dim,
            hidden_dim=args.hidden_dim, proj_gain=args.proj_gain)
        toyworld.save_world(world, args.out)
    elif args.kind == "isotropic":
        geometry = _geometry(args.channels, args.height, args.width, args.patch_size)
        world = toyworld.make_isotropic_world(geometry, seed=args.seed)
        toyworld.save_world(world, args.out)
    else:
        raise ConfigError(f"unknown world kind {args.kind!r}")
    return _finish(args, argv, dict(world.manifest), [args.out], started)


def _load_basis(path) -> codec.PatchBasis:
    try:
        return codec.load_basis(path)
    except FileNotFoundError as e:
        raise DataError(f"basis file not found: {path}") from e


def _load_world_and_basis(world_path, basis_path):
    basis = _load_basis(basis_path) if basis_path else None
    doc = _load_json(world_path, "world")
    if basis is None and "basis_file" in doc:
        basis = _load_basis(doc["basis_file"])
    try:
        world = toyworld.world_from_manifest(doc, basis)
    except (KeyError, TypeError) as e:
        raise ConfigError(f"invalid world manifest {world_path}: {e}") from e
    if basis is not None and world.geometry != basis.geometry:
        raise DataError(
            f"world geometry {world.geometry} incompatible with basis "
            f"geometry {basis.geometry}")
    return world, basis


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args, argv) -> int:
    started = time.perf_counter()
    doc = _load_json(args.config, "train config") if args.config else {}
    try:
        config = training.TrainConfig.from_dict(doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid train config: {e}") from e
    world, basis = _load_world_and_basis(args.world, args.basis)
    if basis is None:
        raise ConfigError("train requires a basis (--basis or a world that names one)")
    params, log = training.train(world, basis, config)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "params.bin")
    metrics = os.path.join(args.out, "metrics.csv")
    lens_net.save_checkpoint(params, ckpt, metadata={
        "train_config": config.to_dict(), "world": world.manifest,
        "final_metrics": log.rows[-1] if log.rows else None})
    log.write_csv(metrics)
    return _finish(args, argv, {"train_config": config.to_dict(),
                                "world": world.manifest},
                   [ckpt, ckpt + ".json", metrics], started)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args, argv) -> int:
    started = time.perf_counter()
    world, basis = _load_world_and_basis(args.world, args.basis)
    if basis is None:
        raise ConfigError("eval requires a basis")
    params = _load_checkpoint(args.ckpt)
    if args.prompts == "heldout":
        _, prompt_ids = training.split_prompts(world, 0.75)
    elif args.prompts == "all":
        prompt_ids = list(range(world.prompts.n_prompts))
    else:
        prompt_ids = [int(p) for p in args.prompts.split(",")]
    report = training.evaluate(params, world, basis, prompt_ids, args.n_noise,
                               RngState(args.seed))
    doc = {"report": report.to_dict(), "prompts": prompt_ids,
           "n_noise": args.n_noise, "seed": args.seed}
    _dump_json(doc, args.out)
    return _finish(args, argv, doc, [args.out], started)


def _load_checkpoint(path) -> lens_net.LensParams:
    try:
        return lens_net.load_checkpoint(path)
    except FileNotFoundError as e:
        raise DataError(f"checkpoint not found: {path}") from e


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def _suite_prop1(args) -> dict:
    reports = [theory.verify_tilt_approximation_bound(inst)
               for inst in theory.default_tilt_instances()]
    return {"passed": all(r.passed for r in reports),
            "instances": [r.to_dict() for r in reports]}


def _suite_stein(args) -> dict:
    n = args.samples or 100_000
    reports = []
    for i, inst in enumerate(theory.default_stein_instances()):
        reports.append(theory.verify_stein_identity(inst, n, RngState(1000 + i)))
    return {"passed": all(r.passed for r in reports),
            "n_samples": n,
            "instances": [r.to_dict() for r in reports]}


def _suite_kl(args) -> dict:
    scales = (0.01, 0.05, 0.1, 0.3, 0.5, 0.9)
    dims = (1, 4, 16)
    reports = [theory.verify_quadratic_kl_bound(s, n).to_dict()
               for s in scales for n in dims]
    mc = [theory.mc_kl_cross_check(s, 4, args.samples or 100_000, RngState(77 + i))
          for i, s in enumerate(scales)]
    passed = all(r["passed"] for r in reports) and all(m["within_3se"] for m in mc)
    return {"passed": passed, "bound_checks": reports, "mc_cross_checks": mc}


def _default_verify_world():
    geometry = codec.PatchGeometry(4, 8, 8, 4)
    basis = codec.permutation_basis(geometry, 16, RngState(5))
    world = toyworld.make_lowfreq_world(basis, 8, seed=3, hidden_dim=96)
    return world, basis


def _suite_objective(args) -> dict:
    world, basis = _default_verify_world()
    rng = RngState(11)
    results = []
    for probe in range(args.probes):
        cfg = lens_net.LensConfig(n_tokens=basis.geometry.n_patches,
                                  coeff_dim=basis.k, hidden_dim=16, n_layers=1,
                                  n_heads=2, prompt_dim=world.prompts.token_dim)
        params = lens_net.init_lens_params(cfg, rng.split(probe))
        for name in params.trainable:  # random nonzero output head too
            if name.startswith("out_proj"):
                params.trainable[name] = 0.1 * rng.split(1000 + probe).normal(
                    params.trainable[name].shape or (1,)).reshape(
                        params.trainable[name].shape)
        const = float(5.0 if probe == 0 else 10.0 * rng.split(2000 + probe).uniform((1,))[0] - 5.0)
        results.append(theory.verify_reward_shift_invariance(
            world, basis, params, n_samples=2, rng=rng.split(3000 + probe),
            const=const))
    return {"passed": all(r["passed"] for r in results), "probes": results}


def _suite_spectrum(args, out_base: str) -> dict:
    world, basis = _default_verify_world()
    j = world.manifest["j"]
    spectrum = theory.gradient_energy_spectrum(
        world, basis, range(world.prompts.n_prompts), args.images or 64, RngState(21))
    csv_path = out_base + ".spectrum.csv"
    spectrum.write_csv(csv_path)
    iso_geometry = codec.PatchGeometry(4, 8, 8, 2)
    iso_basis = codec.random_basis(iso_geometry, 8, RngState(31))
    iso_world = toyworld.make_isotropic_world(iso_geometry, seed=9)
    iso = theory.gradient_energy_spectrum(
        iso_world, iso_basis, range(iso_world.prompts.n_prompts),
        args.images or 64, RngState(41))
    d_iso = iso_geometry.patch_dim
    iso_dev = float(np.max(np.abs(
        iso.cumulative - np.arange(1, d_iso + 1) / d_iso)))
    passed = (spectrum.rho(j) == 1.0
              and float(np.max(spectrum.energies[j:])) == 0.0
              and iso_dev < 0.03)
    return {"passed": passed, "j": j, "rho_j": spectrum.rho(j),
            "max_energy_above_j": float(np.max(spectrum.energies[j:])),
            "isotropic_max_rho_deviation": iso_dev, "csv": csv_path}


def _suite_bench(args) -> dict:
    grid = [(n, 32, h) for n in (4, 16, 64) for h in (16, 32, 64)]
    rows = theory.complexity_bench(grid, repeats=args.repeats)
    core = theory.core_scaling_fit(rows)
    full = theory.full_scaling_fit(rows)
    doubled = theory.bench_config(lens_net.LensConfig(n_tokens=8, coeff_dim=32,
                                                      hidden_dim=32), repeats=1)
    base = theory.bench_config(lens_net.LensConfig(n_tokens=4, coeff_dim=32,
                                                   hidden_dim=32), repeats=1)
    ratio = doubled.macs["self_attn_scores"] / base.macs["self_attn_scores"]
    return {"passed": core["max_rel_residual"] < 0.05 and ratio == 4.0,
            "core_fit": core, "full_fit": full,
            "attention_doubling_ratio": ratio,
            "rows": [r.to_dict() for r in rows]}


def cmd_verify(args, argv) -> int:
    started = time.perf_counter()
    suites = {
        "prop1": _suite_prop1,
        "stein": _suite_stein,
        "kl": _suite_kl,
        "objective": _suite_objective,
        "bench": _suite_bench,
    }
    if args.suite == "spectrum":
        result = _suite_spectrum(args, os.path.splitext(str(args.out))[0])
    else:
        result = suites[args.suite](args)
    doc = {"suite": args.suite, "passed": bool(result["passed"]), **result}
    _dump_json(doc, args.out)
    code = _finish(args, argv, {"suite": args.suite}, [args.out], started)
    if not doc["passed"]:
        print(f"verify {args.suite}: FAIL", file=sys.stderr)
        return EXIT_NUMERICAL
    return code


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def cmd_bench(args, argv) -> int:
    started = time.perf_counter()
    ns = [int(x) for x in args.tokens.split(",")]
    hs = [int(x) for x in args.hidden.split(",")]
    rows = theory.complexity_bench([(n, args.k, h) for n in ns for h in hs],
                                   repeats=args.repeats)
    doc = {"rows": [r.to_dict() for r in rows],
           "core_fit": theory.core_scaling_fit(rows),
           "full_fit": theory.full_scaling_fit(rows)}
    _dump_json(doc, args.out)
    return _finish(args, argv, {"tokens": ns, "hidden": hs, "k": args.k},
                   [args.out], started)


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def _ablate_worker(payload: dict) -> dict:
    basis = codec.PatchBasis(
        codec.PatchGeometry.from_dict(payload["geometry"]),
        np.asarray(payload["basis_v"]), np.asarray(payload["basis_mean"]),
        np.asarray(payload["basis_eigenvalues"]), payload["k"], validate=False)
    world = toyworld.world_from_manifest(payload["world_manifest"], basis)
    config = training.TrainConfig.from_dict(payload["train_config"])
    net_cfg = lens_net.LensConfig(
        n_tokens=basis.geometry.n_patches, coeff_dim=basis.k,
        hidden_dim=config.hidden_dim, n_layers=payload.get("n_layers", config.n_layers),
        n_heads=config.n_heads, prompt_dim=world.prompts.token_dim)
    params, log = training.train(world, basis, config, net_config=net_cfg)
    _, heldout = training.split_prompts(world, config.train_prompt_fraction)
    report = training.evaluate(params, world, basis, heldout, 64,
                               RngState(config.seed + 9999))
    macs = theory.modulation_pathway_macs(basis, net_cfg)
    return {
        "setting": payload["setting"], "value": payload["value"],
        "final_reward_with": report.mean_with,
        "final_reward_without": report.mean_without,
        "mean_delta": report.mean_delta, "frac_improved": report.frac_improved,
        "modulation_macs": macs, "parameter_count": params.parameter_count(),
    }


ABLATION_COLUMNS = ["setting", "value", "final_reward_with", "final_reward_without",
                    "mean_delta", "frac_improved", "modulation_macs",
                    "parameter_count"]


def _basis_payload(basis: codec.PatchBasis) -> dict:
    return {"geometry": basis.geometry.to_dict(), "basis_v": basis.basis.tolist(),
            "basis_mean": basis.mean.tolist(),
            "basis_eigenvalues": basis.eigenvalues.tolist(), "k": basis.k}


def cmd_ablate(args, argv) -> int:
    started = time.perf_counter()
    doc = _load_json(args.config, "train config") if args.config else {}
    try:
        base_config = training.TrainConfig.from_dict(doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid train config: {e}") from e
    payloads = []
    if args.dim == "k":
        world, basis = _load_world_and_basis(args.world, args.basis)
        if basis is None:
            raise ConfigError("k-ablation requires a basis")
        d = basis.geometry.patch_dim
        values = [max(1, d // 8), max(1, d // 4), max(1, d // 2), d]
        for k in values:
            payloads.append({"setting": "k", "value": k,
                             "world_manifest": world.manifest,
                             "train_config": base_config.to_dict(),
                             **_basis_payload(basis.with_k(k))})
    elif args.dim == "s":
        world, _ = _load_world_and_basis(args.world, args.basis)
        g = world.geometry
        values = [s for s in range(1, g.height + 1)
                  if g.height % s == 0 and g.width % s == 0]
        for s in values:
            geometry = codec.PatchGeometry(g.channels, g.height, g.width, s)
            rng = RngState(base_config.seed + s)
            samples = codec.synthetic_latents(geometry, max(4 * geometry.patch_dim
                                                            // geometry.n_patches + 1, 64),
                                              rng)
            sub_basis = codec.extract_basis(
                list(samples), geometry, min(args.k_for_s, geometry.patch_dim))
            payloads.append({"setting": "s", "value": s,
                             "world_manifest": world.manifest,
                             "train_config": base_config.to_dict(),
                             **_basis_payload(sub_basis)})
    elif args.dim == "layers":
        world, basis = _load_world_and_basis(args.world, args.basis)
        if basis is None:
            raise ConfigError("layer ablation requires a basis")
        for n_layers in (4, 8, 12):
            payloads.append({"setting": "layers", "value": n_layers,
                             "n_layers": n_layers,
                             "world_manifest": world.manifest,
                             "train_config": base_config.to_dict(),
                             **_basis_payload(basis)})
    else:
        raise ConfigError(f"unknown ablation dimension {args.dim!r}")

    workers = int(os.environ.get("LENS_THREADS", "1"))
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_ablate_worker, payloads))
    else:
        rows = [_ablate_worker(p) for p in payloads]
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, f"ablation_{args.dim}.csv")
    with open(csv_path, "w") as fh:
        fh.write(",".join(ABLATION_COLUMNS) + "\n")
        for row in rows:  # aggregation order fixed by setting index
            fh.write(",".join(repr(row[c]) if isinstance(row[c], float)
                              else str(row[c]) for c in ABLATION_COLUMNS) + "\n")
    return _finish(args, argv, {"dim": args.dim,
                                "values": [p["value"] for p in payloads],
                                "train_config": base_config.to_dict()},
                   [csv_path], started)


# ---------------------------------------------------------------------------
# Parser and dispatch.
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lens",
        description="Low-frequency eigen noise shaping laboratory")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("basis", help="extract a patch PCA basis")
    p.add_argument("--samples", help="npy file of latents (n, C, H, W)")
    p.add_argument("--synthetic", type=int, default=256,
                   help="number of synthetic latents when --samples is absent")
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--height", type=int, default=8)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--smoothness", type=float, default=1.0)
    p.add_argument("--patch-size", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_basis)

    p = sub.add_parser("world", help="construct a toy world manifest")
    p.add_argument("--kind", choices=["generic", "lowfreq", "isotropic"],
                   default="generic")
    p.add_argument("--basis", help="basis file (required for lowfreq)")
    p.add_argument("--j", type=int, default=8,
                   help="reward-relevant coefficients per patch (lowfreq)")
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--height", type=int, default=8)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--patch-size", type=int, default=4)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--hidden-dim", type=int, default=2560)
    p.add_argument("--proj-gain", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_world)

    p = sub.add_parser("train", help="train the modulation network")
    p.add_argument("--world", required=True)
    p.add_argument("--basis", required=True)
    p.add_argument("--config", help="train config JSON")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="paired evaluation of a checkpoint")
    p.add_argument("--world", required=True)
    p.add_argument("--basis", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompts", default="heldout",
                   help="'heldout', 'all', or comma-separated prompt ids")
    p.add_argument("--n-noise", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run a verification suite")
    p.add_argument("--suite", required=True,
                   choices=["prop1", "stein", "kl", "objective", "spectrum", "bench"])
    p.add_argument("--samples", type=int, help="MC sample override")
    p.add_argument("--images", type=int, help="spectrum image count")
    p.add_argument("--probes", type=int, default=20)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="complexity and timing benchmark")
    p.add_argument("--tokens", default="4,16,64")
    p.add_argument("--hidden", default="16,32,64")
    p.add_argument("--k", type=int, default=32)
    p.add_argument("--repeats", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="sweep k, patch size, or layer count")
    p.add_argument("--dim", required=True, choices=["k", "s", "layers"])
    p.add_argument("--world", required=True)
    p.add_argument("--basis")
    p.add_argument("--config", help="train config JSON")
    p.add_argument("--k-for-s", type=int, default=4,
                   help="fixed k when sweeping patch size")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0,) else 0
    try:
        return args.func(args, argv)
    except ConfigError as e:
        print(f"lens {args.command}: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError, codec.InsufficientDataError,
            codec.DegenerateDataError, FileNotFoundError) as e:
        print(f"lens {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"lens {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
