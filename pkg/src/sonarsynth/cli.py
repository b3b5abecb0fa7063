"""Command-line front end.

Each subcommand runs one pipeline stage against an output directory, so a
full experiment can be driven either by `sonarsynth experiment` or by the
stage commands in order:

  synth -> train-diffusion -> sample -> eval-gen -> train-seg -> eval-seg
  -> verify

Stages read their prerequisites from --out-dir, which makes reruns and
partial repairs cheap. All behavior is controlled by a JSON config file
(see ExperimentConfig); --seed and --out-dir override the file.
"""
import argparse
import json
import os
import sys

from . import experiment as ex
from .denoiser import Denoiser
from .schedule import linear_schedule
from .segmenter import SegModel
from .storage import DatasetManifest


def _load_config(args):
    if args.config:
        cfg = ex.ExperimentConfig.load(args.config)
    else:
        cfg = ex.ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    if overrides:
        d = cfg.to_json_dict()
        d.update(overrides)
        cfg = ex.ExperimentConfig.from_json_dict(d)
    cfg.validate()
    return cfg


def _manifest(cfg, sub):
    path = os.path.join(cfg.out_dir, sub, "manifest.json")
    if not os.path.exists(path):
        raise SystemExit(f"missing {path}; run the earlier stages first")
    return DatasetManifest.load(path)


def _schedule(cfg):
    return linear_schedule(cfg.schedule.num_steps, cfg.schedule.beta_start,
                           cfg.schedule.beta_end)


def _denoiser(cfg):
    path = os.path.join(cfg.out_dir, "denoiser.bin")
    if not os.path.exists(path):
        raise SystemExit(f"missing {path}; run train-diffusion first")
    return Denoiser.load(path)


def _timing(cfg):
    path = os.path.join(cfg.out_dir, "timing.json")
    if not os.path.exists(path):
        return {}
    with open(path) as f:
        return json.load(f)


def cmd_synth(args):
    cfg = _load_config(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    raw, pool, test = ex.stage_synth(cfg)
    print(f"synth: {len(raw.entries)} raw, {len(pool.entries)} pool, "
          f"{len(test.entries)} test -> {cfg.out_dir}")


def cmd_train_diffusion(args):
    cfg = _load_config(args)
    raw = _manifest(cfg, "original_raw")
    _, _, history = ex.stage_train_diffusion(cfg, raw)
    print(f"train-diffusion: probe loss {history[0]:.4f} -> {history[-1]:.4f}")


def cmd_sample(args):
    cfg = _load_config(args)
    model = _denoiser(cfg)
    ddpm_man, ddim_man, timing = ex.stage_sample(cfg, model, _schedule(cfg))
    print(f"sample: {len(ddpm_man.entries)} ddpm ({timing['ddpm_it_s']:.3f}"
          f" s/img), {len(ddim_man.entries)} ddim ({timing['ddim_it_s']:.3f}"
          f" s/img)")


def cmd_eval_gen(args):
    cfg = _load_config(args)
    raw = _manifest(cfg, "original_raw")
    ddpm_man = _manifest(cfg, "gen_ddpm")
    ddim_man = _manifest(cfg, "gen_ddim")
    report = ex.stage_eval_gen(cfg, raw, ddpm_man, ddim_man, _schedule(cfg),
                               _timing(cfg))
    for r in report.rows:
        print(f"eval-gen: {r.model} fid={r.fid:.2f} kid={r.kid:.4f} "
              f"orr={r.orr:.2f}")


def cmd_train_seg(args):
    cfg = _load_config(args)
    pool = _manifest(cfg, "original_pool")
    ddpm_man = _manifest(cfg, "gen_ddpm")
    ddim_man = _manifest(cfg, "gen_ddim")
    combos, _ = ex.stage_train_seg(cfg, pool, ddpm_man, ddim_man)
    sizes = ", ".join(f"{n}={len(m.entries)}" for n, m in combos.items())
    print(f"train-seg: {sizes}")


def cmd_eval_seg(args):
    cfg = _load_config(args)
    test = _manifest(cfg, "test")
    models = {}
    for name in cfg.combinations:
        path = os.path.join(cfg.out_dir,
                            f"seg_{name.replace('+', '_').lower()}.bin")
        if not os.path.exists(path):
            raise SystemExit(f"missing {path}; run train-seg first")
        models[name] = SegModel.load(path)
    report = ex.stage_eval_seg(cfg, models, test)
    for r in report.rows:
        print(f"eval-seg: {r.name}: ap50={r.ap_50:.3f} "
              f"ap50:95={r.ap_50_95:.3f} aupc={r.aupc:.3f}")


def cmd_verify(args):
    cfg = _load_config(args)
    claims = ex.verify_claims(cfg.out_dir)
    ok = True
    for c in claims:
        print(f"verify: {c['claim']} [{c['verdict']}] margin={c['margin']:+.4f}")
        ok = ok and c["verdict"] != "fail"
    return 0 if ok else 1


def cmd_experiment(args):
    cfg = _load_config(args)
    bundle = ex.run_experiment(cfg)
    for c in bundle["claims"]:
        print(f"{c['claim']}: {c['verdict']} (margin {c['margin']:+.4f})")
    print(f"reports written to {cfg.out_dir}")
    return 0 if all(c["verdict"] != "fail" for c in bundle["claims"]) else 1


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="sonarsynth",
        description="synthetic side-scan sonar data pipeline")
    parser.add_argument("--config", help="JSON experiment config")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument("--out-dir", help="override config output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    handlers = {
        "synth": cmd_synth,
        "train-diffusion": cmd_train_diffusion,
        "sample": cmd_sample,
        "eval-gen": cmd_eval_gen,
        "train-seg": cmd_train_seg,
        "eval-seg": cmd_eval_seg,
        "experiment": cmd_experiment,
        "verify": cmd_verify,
    }
    helps = {
        "synth": "synthesize original and test datasets",
        "train-diffusion": "train the denoiser on the raw originals",
        "sample": "draw DDPM and DDIM sets from the trained denoiser",
        "eval-gen": "score generated sets (table1.csv, table2.csv)",
        "train-seg": "train segmenters on the dataset combinations",
        "eval-seg": "evaluate segmenters on the test set (table3.csv)",
        "experiment": "run every stage end to end",
        "verify": "recompute claim verdicts from the CSV reports",
    }
    for name, fn in handlers.items():
        p = sub.add_parser(name, help=helps[name])
        p.set_defaults(func=fn)
    args = parser.parse_args(argv)
    rc = args.func(args)
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
