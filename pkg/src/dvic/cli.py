"""Command-line front end: synth | cluster | unmix | eval | gridsearch.

Heavy imports happen after thread setup so the BLAS pool can be pinned to one
thread and the scan kernels to the requested worker count; label files are
then byte-identical for any --threads value.  Every artifact embeds the full
parameter record and seed.  Exit codes: 0 success, 2 configuration error,
3 I/O error, 4 convergence error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CONVERGENCE = 4

# 20-color palette for cluster maps (RGB), cycled when K > 20
_PALETTE = [
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189),
    (140, 86, 75), (227, 119, 194), (127, 127, 127), (188, 189, 34), (23, 190, 207),
    (174, 199, 232), (255, 187, 120), (152, 223, 138), (255, 152, 150), (197, 176, 213),
    (196, 156, 148), (247, 182, 210), (199, 199, 199), (219, 219, 141), (158, 218, 229),
]


def _setup_threads(threads: int | None) -> int:
    """Pin BLAS to one thread and the scan kernels to the requested count.

    Must run before numpy/numba are imported.  The default comes from
    DVIC_NUM_THREADS, falling back to the CPU count.
    """
    if threads is None:
        threads = int(os.environ.get("DVIC_NUM_THREADS", os.cpu_count() or 1))
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    os.environ.setdefault("MKL_NUM_THREADS", "1")
    os.environ["NUMBA_NUM_THREADS"] = str(max(threads, 1))
    return max(threads, 1)


def _json_dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _write_pgm_map(labels, shape, path: Path) -> None:
    """Binary P6 cluster map, row-major, one palette color per label."""
    rows, cols = shape
    img = bytearray()
    for v in labels:
        r, g, b = _PALETTE[(int(v) - 1) % len(_PALETTE)]
        img += bytes((r, g, b))
    with open(path, "wb") as fh:
        fh.write(f"P6\n{cols} {rows}\n255\n".encode())
        fh.write(bytes(img))


def _load_input(args):
    from .datasets import DatasetSpec, load_csv, load_dataset, load_envi

    if getattr(args, "config", None):
        cfg = json.loads(Path(args.config).read_text())
        spec = DatasetSpec(
            source=cfg["source"],
            path=cfg.get("path"),
            params=cfg.get("params", {}),
            band_drop=tuple(cfg.get("band_drop", ())),
            standardize=bool(cfg.get("standardize", False)),
            jitter_sigma=cfg.get("jitter_sigma"),
            seed=int(cfg.get("seed", 0)),
        )
        cloud, _ = load_dataset(spec)
        return cloud
    path = Path(args.input)
    if not path.exists():
        raise OSError(f"input file not found: {path}")
    if path.suffix.lower() == ".hdr":
        return load_envi(path)
    return load_csv(path)


def _cmd_synth(args) -> int:
    from .datasets import save_csv, save_labels, synth_moons, synth_triangle

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "triangle":
        cloud, truth = synth_triangle(seed=args.seed)
        params = {"kind": "triangle", "seed": args.seed, "n": cloud.n}
    else:
        cloud = synth_moons(n=args.n, noise_sigma=args.noise_sigma, seed=args.seed)
        params = {
            "kind": "moons",
            "seed": args.seed,
            "n": args.n,
            "noise_sigma": args.noise_sigma,
        }
    save_csv(cloud, out / "cloud.csv", include_labels=False)
    save_labels(cloud.labels, out / "truth.csv")
    _json_dump({"command": "synth", "params": params}, out / "manifest.json")
    print(f"wrote {cloud.n} points to {out / 'cloud.csv'}")
    return EXIT_OK


def _cluster_params(args) -> dict:
    return {
        "algorithm": args.algorithm,
        "N": args.N,
        "sigma0": args.sigma0,
        "t": args.t,
        "K": args.K,
        "ell": args.ell,
        "replicates": args.replicates,
        "seed": args.seed,
        "m": args.m,
        "n_kde": args.n_kde,
    }


def _cmd_cluster(args) -> int:
    import numpy as np

    from .clustering import dvic, kmeans, lund, spectral_clustering
    from .datasets import save_labels
    from .graph import build_knn_graph

    cloud = _load_input(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    t0 = time.perf_counter()
    if args.algorithm == "lund":
        result = lund(cloud, args.N, args.sigma0, args.t, args.K, ell=args.ell,
                      n_kde=args.n_kde)
    elif args.algorithm == "dvic":
        result = dvic(cloud, args.N, args.sigma0, args.t, args.K, ell=args.ell,
                      replicates=args.replicates, seed=args.seed, m=args.m,
                      n_kde=args.n_kde)
    elif args.algorithm == "kmeans":
        result = kmeans(cloud, args.K, replicates=args.replicates, seed=args.seed)
    elif args.algorithm == "spectral":
        graph = build_knn_graph(cloud, args.N)
        result = spectral_clustering(graph, args.K, replicates=args.replicates,
                                     seed=args.seed)
    else:
        raise ValueError(f"unknown algorithm {args.algorithm!r}")
    timings["cluster_s"] = time.perf_counter() - t0

    save_labels(result.labels, out / "labels.csv")
    save_labels(result.modes, out / "modes.csv")
    report = {
        "command": "cluster",
        "params": _cluster_params(args),
        "resolved_params": result.params,
        "timings": timings,
        "n": cloud.n,
    }
    if "eta" in result.scores:
        eta = result.scores["eta"]
        report["unmixing"] = {
            "m": result.params.get("m"),
            "eta_min": float(eta.min()),
            "eta_median": float(np.median(eta)),
            "eta_max": float(eta.max()),
        }
    if cloud.shape is not None:
        _write_pgm_map(result.labels, cloud.shape, out / "map.pgm")
        report["map"] = "map.pgm"
    elif args.algorithm in ("lund", "dvic"):
        report["map"] = None  # no spatial shape: map skipped, labels still written
    _json_dump(report, out / "report.json")
    print(f"clustered {cloud.n} points into K={result.K}; labels at {out / 'labels.csv'}")
    return EXIT_OK


def _cmd_unmix(args) -> int:
    import numpy as np

    from .datasets import save_csv
    from .graph import PointCloud
    from .unmixing import abundances_and_purity, avmax, estimate_noise, hysime

    cloud = _load_input(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    t0 = time.perf_counter()
    noise = estimate_noise(cloud)
    timings["noise_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    hysime_m = hysime(cloud, noise)
    m = args.m if args.m is not None else hysime_m
    timings["hysime_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    um = avmax(cloud, m, args.replicates, args.seed)
    um = abundances_and_purity(cloud, um.U, base=um)
    timings["avmax_nnls_s"] = time.perf_counter() - t0
    save_csv(PointCloud(um.U), out / "endmembers.csv", include_labels=False)
    save_csv(PointCloud(um.A), out / "abundances.csv", include_labels=False)
    (out / "purity.csv").write_text(
        "eta\n" + "\n".join(repr(float(v)) for v in um.eta) + "\n"
    )
    report = {
        "command": "unmix",
        "params": {"m": args.m, "replicates": args.replicates, "seed": args.seed},
        "m": int(um.m),
        "hysime_m": int(hysime_m),
        "ridge_used": bool(noise.ridge_used),
        "eta_median": float(np.median(um.eta)),
        "solver": um.solver,
        "timings": timings,
    }
    _json_dump(report, out / "report.json")
    print(f"m={um.m}, median purity {float(np.median(um.eta)):.3f}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .datasets import load_labels
    from .evaluation import align_and_score

    pred = load_labels(Path(args.pred))
    truth = load_labels(Path(args.truth))
    report = align_and_score(pred, truth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": "eval",
        "oa": report.oa,
        "kappa": report.kappa,
        "n_eval": report.n_eval,
        "alignment": {str(k): v for k, v in report.alignment.items()},
        "confusion": report.confusion.tolist(),
    }
    _json_dump(payload, out / "report.json")
    print(f"OA {report.oa:.4f}  kappa {report.kappa:.4f}  n {report.n_eval}")
    return EXIT_OK


def _cmd_gridsearch(args) -> int:
    from .evaluation import GridSpec, grid_search, n_grid, sigma_grid, t_grid

    cloud = _load_input(args)
    if args.n_grid:
        Ns = [int(v) for v in args.n_grid.split(",")]
    else:
        Ns = n_grid(args.n_lo, min(args.n_hi, cloud.n - 1), args.n_count)
    sigmas = sigma_grid(cloud, args.sigma_count)
    ts = [float(v) for v in args.t_grid.split(",")] if args.t_grid else None
    spec = GridSpec(N_grid=tuple(Ns), sigma_grid=tuple(sigmas), t_grid=ts,
                    trials=args.trials, seed=args.seed)
    params = {"K": args.K, "ell": args.ell, "replicates": args.replicates}
    if args.m is not None:
        params["m"] = args.m
    result = grid_search(args.algorithm, cloud, spec, params=params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = result.to_dict()
    payload["command"] = "gridsearch"
    payload["params"] = {
        "algorithm": args.algorithm,
        "trials": args.trials,
        "seed": args.seed,
        **params,
    }
    _json_dump(payload, out / "grid.json")
    if result.best is None:
        print("grid search produced no successful nodes")
    else:
        b = result.best
        print(
            f"best median OA {b['median_oa']:.4f} at N={b['N']} sigma0={b['sigma0']} t={b['t']}"
        )
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dvic",
        description="Diffusion-geometry clustering toolkit (D-VIC, LUND, baselines)",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: DVIC_NUM_THREADS or CPU count)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("kind", choices=["triangle", "moons"])
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("cluster", help="cluster a point cloud")
    p.add_argument("--input", help="CSV or ENVI .hdr input")
    p.add_argument("--config", help="dataset spec JSON (alternative to --input)")
    p.add_argument("--algorithm", required=True,
                   choices=["lund", "dvic", "kmeans", "spectral"])
    p.add_argument("--N", type=int, default=20)
    p.add_argument("--sigma0", type=float, default=1.0)
    p.add_argument("--t", type=float, default=50.0)
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--ell", type=int, default=10)
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--m", type=int, default=None,
                   help="endmember count override (default: HySime estimate)")
    p.add_argument("--n-kde", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("unmix", help="run the spectral-unmixing stack")
    p.add_argument("--input", help="CSV or ENVI .hdr input")
    p.add_argument("--config")
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score predicted labels against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gridsearch", help="hyperparameter sweep")
    p.add_argument("--input")
    p.add_argument("--config")
    p.add_argument("--algorithm", required=True,
                   choices=["lund", "dvic", "kmeans", "spectral"])
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--ell", type=int, default=10)
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--n-grid", help="comma-separated N values")
    p.add_argument("--n-lo", type=int, default=10)
    p.add_argument("--n-hi", type=int, default=900)
    p.add_argument("--n-count", type=int, default=10)
    p.add_argument("--sigma-count", type=int, default=20)
    p.add_argument("--t-grid", help="comma-separated t values (default: auto)")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


_HANDLERS = {
    "synth": _cmd_synth,
    "cluster": _cmd_cluster,
    "unmix": _cmd_unmix,
    "eval": _cmd_eval,
    "gridsearch": _cmd_gridsearch,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    threads = _setup_threads(args.threads)
    from .errors import ConvergenceError, LoadError, ParameterError

    import numba

    numba.set_num_threads(threads)
    try:
        return _HANDLERS[args.command](args)
    except (LoadError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (ParameterError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
