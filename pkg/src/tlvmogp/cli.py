"""Command-line entry point: ``tlvmogp <command> ...``.

Every command exits 0 on success. Failures print a single line
``error: <ErrorType>: <message>`` on stderr and exit 1 (2 for usage errors).
"""
from __future__ import annotations

import argparse
import csv
import os
import sys

from .ablation import load_grid, run_grid, summarise, write_results
from .checkpoint import load_checkpoint
from .config import load_config, load_split_spec, load_synth_spec
from .data import SplitSpec, generate_synthetic, load_dataset, save_dataset, save_truth, split
from .predictor import align_dataset, evaluate_dataset, predict, PREDICT_STREAM
from .trainer import gradcheck_suite, stream, train

GRADCHECK_TOL = 1e-5


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def cmd_train(args) -> None:
    cfg = load_config(args.config)
    ds = load_dataset(args.data)
    ckpt, history = train(ds, cfg)
    ckpt.save(args.out)
    if args.history:
        history.to_csv(args.history)
    print(f"trained {cfg.epochs} epochs ({history.steps_per_epoch} steps each); "
          f"final elbo {history.elbo[-1]:.6g}; checkpoint {args.out}")


def cmd_predict(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    x, p, mu0 = align_dataset(ckpt, ds, args.prior_mode)
    samples = args.samples or ckpt.config.eval_samples
    pred = predict(ckpt.model, x, p, samples, stream(ckpt.config.seed, PREDICT_STREAM),
                   prior_mode=args.prior_mode, prior_mean=mu0)
    mean = pred.point_prediction().numpy()
    var = pred.observation_variance().numpy()
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["input_id", "output_id", "pred_mean", "pred_var"])
        for n, j, m, v in zip(ds.n, ds.p, mean, var):
            w.writerow([ds.input_ids[n], ds.output_ids[j], _fmt(m), _fmt(v)])
    print(f"wrote {len(mean)} predictions to {args.out}")


def cmd_eval(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    ev = evaluate_dataset(ckpt, ds, args.samples, prior_mode=args.prior_mode)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["input_id", "output_id", "y_true", "pred_mean", "pred_var", "nll"])
        for n, j, y, m, v, l in zip(ev.n, ev.p, ev.y, ev.pred_mean, ev.pred_var, ev.nll):
            w.writerow([ds.input_ids[n], ds.output_ids[j], _fmt(y), _fmt(m), _fmt(v), _fmt(l)])
        w.writerow(["# summary", f"mse={_fmt(ev.mse)}", f"mean_nll={_fmt(ev.mean_nll)}"])
    print(f"mse {ev.mse:.6g} mean_nll {ev.mean_nll:.6g} over {len(ev.y)} observations")


def cmd_split(args) -> None:
    ds = load_dataset(args.data)
    base = load_split_spec(args.config) if args.config else SplitSpec()
    spec = SplitSpec(
        scheme=args.scheme or base.scheme,
        fraction=args.fraction if args.fraction is not None else base.fraction,
        block_length=args.block_length if args.block_length is not None else base.block_length,
        outputs_per_block=args.outputs_per_block if args.outputs_per_block is not None else base.outputs_per_block,
        positions=base.positions,
        seed=args.seed if args.seed is not None else base.seed,
    )
    tr, te = split(ds, spec)
    for name, part in (("train", tr), ("test", te)):
        save_dataset(part, os.path.join(args.out, name))
    print(f"train {tr.n_obs} / test {te.n_obs} observations in {args.out}")


def cmd_synth(args) -> None:
    spec = load_synth_spec(args.spec)
    ds, truth = generate_synthetic(spec, args.seed)
    save_dataset(ds, args.out)
    save_truth(truth, args.out)
    print(f"synthetic dataset N={ds.N} P={ds.P} written to {args.out}")


def cmd_gradcheck(args) -> None:
    cfg = load_config(args.config)
    ds = load_dataset(args.data)
    reports = gradcheck_suite(ds, cfg)
    worst = 0.0
    for bound, rep in reports.items():
        print(f"{bound}: checked {rep.n_checked} entries, max relative error {rep.max_rel_error:.3e}")
        worst = max(worst, rep.max_rel_error)
    if worst >= GRADCHECK_TOL:
        raise GradCheckFailure(f"max relative error {worst:.3e} >= {GRADCHECK_TOL:g}")


def cmd_ablate(args) -> None:
    grid = load_grid(args.grid)
    ds = load_dataset(args.data)
    results = run_grid(grid, ds, workers=args.workers)
    cells, summary = write_results(results, args.out)
    for row in summarise(results):
        print(f"{row['config_name']}: mse {row['mse_mean']:.4g} +- {row['mse_std']:.2g}, "
              f"nll {row['nll_mean']:.4g} +- {row['nll_std']:.2g} ({row['failed']} failed)")
    print(f"wrote {cells} and {summary}")


class GradCheckFailure(RuntimeError):
    pass


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tlvmogp", description="Transformed latent-variable multi-output GPs")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model and write a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predictive mean and variance for every pair in a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int)
    p.add_argument("--prior-mode", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="per-observation report with MSE and NLL summary")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int)
    p.add_argument("--prior-mode", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("split", help="write train/ and test/ datasets")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scheme", choices=["random", "block"])
    p.add_argument("--seed", type=int)
    p.add_argument("--fraction", type=float)
    p.add_argument("--block-length", type=int)
    p.add_argument("--outputs-per-block", type=int)
    p.add_argument("--config", help="file with a [split] section supplying defaults")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("synth", help="sample a dataset from a separable MOGP prior")
    p.add_argument("--spec", required=True, help="file with a [synth] section")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference check of the ELBO on a subsampled model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run an experiment grid")
    p.add_argument("--grid", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # one parsable line for any failure
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
