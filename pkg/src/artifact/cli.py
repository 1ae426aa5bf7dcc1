"""Command-line entry point: ``python -m artifact <command>`` (or the ``artifact`` script).

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attacks, defenses, harness
from .datagen import DownstreamSetting, load_world, read_samples, sample_downstream, save_world, write_samples
from .downstream import DownstreamModel, HeadArch, fine_tune
from .nn import checkpoint as ckptmod
from .upstream import ManipulatedModel, Mask

log = logging.getLogger("artifact")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _globals() -> argparse.ArgumentParser:
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", type=Path, help="YAML experiment config")
    g.add_argument("--seed", type=int, help="master seed (overrides the config)")
    g.add_argument("--jobs", type=int, help="worker processes")
    g.add_argument("--out", type=Path, help="output directory or file")
    g.add_argument("-v", "--verbose", action="store_true")
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _globals()
    p = _Parser(prog="artifact", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="write the synthetic world to --out")

    s = sub.add_parser("train-upstream", parents=[common], help="train one upstream variant")
    s.add_argument("--variant", choices=harness.VARIANTS, default="zero_activation")

    s = sub.add_parser("train-downstream", parents=[common], help="fine-tune a head on a frozen extractor")
    s.add_argument("--upstream", type=Path, required=True)
    s.add_argument("--data", type=Path, help="world directory from gen-data (default: regenerate)")
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--n-t", type=int, default=0)
    s.add_argument("--hidden", type=int, nargs="*", default=[])
    s.add_argument("--init-policy", choices=["fresh_random", "reuse_upstream"], default="fresh_random")

    s = sub.add_parser("attack", parents=[common], help="score downstream checkpoints")
    s.add_argument("--method", choices=attacks.METHODS, required=True)
    s.add_argument("--model", type=Path, nargs="+", required=True, help="downstream checkpoints")
    s.add_argument("--mask-file", type=Path, help="JSON mask (default: the upstream checkpoint's first mask)")
    s.add_argument("--upstream", type=Path, help="upstream checkpoint (needed for shadows and the default mask)")
    s.add_argument("--probe-file", type=Path, help="probe samples CSV (default: the world's probe set)")
    s.add_argument("--shadow-dir", type=Path, help="shadow pool directory (built there if empty)")
    s.add_argument("--data", type=Path)

    s = sub.add_parser("defend", parents=[common], help="run one detector on an upstream checkpoint")
    s.add_argument("--method", choices=harness.DEFENSES, required=True)
    s.add_argument("--upstream", type=Path, required=True)
    s.add_argument("--samples", type=Path, help="defender's training set CSV (default: a victim-side draw)")
    s.add_argument("--n-t", type=int, default=100, help="property count of the default draw / filter budget")
    s.add_argument("--mask-file", type=Path, help="true mask, for probe scoring")
    s.add_argument("--data", type=Path)

    sub.add_parser("sweep", parents=[common], help="run (or resume) the full grid")
    sub.add_parser("report", parents=[common], help="rewrite the CSV summaries from --out/records.jsonl")

    s = sub.add_parser("calibrate-tau", parents=[common], help="zero-check threshold from clean models")
    s.add_argument("--models", type=int, default=8)
    s.add_argument("--samples", type=int, default=2000)
    return p


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.jobs is not None:
        cfg.jobs = args.jobs
    return cfg.validate()


def _world(cfg, args):
    data = getattr(args, "data", None)
    return load_world(data) if data else harness.build_world(cfg)


def _need_out(args) -> Path:
    if args.out is None:
        raise harness.ConfigError("--out is required for this command")
    return args.out


def _emit(rows: list[dict], out: Path | None) -> None:
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)


def _load_upstream(path: Path) -> ManipulatedModel:
    return ManipulatedModel.from_checkpoint(ckptmod.load(path))


def _mask(args) -> Mask:
    if args.mask_file:
        return Mask.from_json(json.loads(args.mask_file.read_text()))
    if args.upstream is None:
        raise harness.ConfigError("need --mask-file or --upstream")
    masks = _load_upstream(args.upstream).masks
    if not masks:
        raise harness.ConfigError("upstream checkpoint carries no mask; pass --mask-file")
    return masks[0]


def _shadow_pool(cfg, world, args, head: HeadArch, policy: str) -> attacks.ShadowPool:
    if args.upstream is None or args.shadow_dir is None:
        raise harness.ConfigError("meta attacks need --upstream and --shadow-dir")
    up = _load_upstream(args.upstream)
    index = args.shadow_dir / "shadows.json"
    if index.exists():
        entries = json.loads(index.read_text())
        def load(split):
            return [attacks.Shadow(DownstreamModel.from_checkpoint(ckptmod.load(args.shadow_dir / e["file"])),
                                   e["label"], e["n_t"]) for e in entries if e["split"] == split]
        return attacks.ShadowPool(load("train"), load("val"), up.params, head)
    mc = cfg.meta
    pool = attacks.build_shadow_pool(up.params, world.attacker, mc.count_per_class, harness._shadow_n(cfg),
                                     tuple(mc.nt_range), seed=cfg.seed, head_arch=head, init_policy=policy,
                                     training=cfg.downstream.training)
    args.shadow_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for split in ("train", "val"):
        for i, s in enumerate(getattr(pool, split)):
            name = f"{split}_{i:03d}.ckpt"
            ckptmod.save(s.model.checkpoint(), args.shadow_dir / name)
            entries.append({"file": name, "split": split, "label": s.label, "n_t": s.n_t})
    index.write_text(json.dumps(entries, indent=1))
    return pool


def cmd_gen_data(cfg, args):
    out = save_world(harness.build_world(cfg), _need_out(args))
    print(out)


def cmd_train_upstream(cfg, args):
    out = _need_out(args)
    path = out if out.suffix == ".ckpt" else out / f"{args.variant}.ckpt"
    model, _, extra = harness.train_variant(cfg, harness.build_world(cfg), args.variant)
    harness.save_upstream(model, path)
    print(json.dumps({"checkpoint": str(path), "variant": args.variant,
                      "accuracy": model.log[-1]["accuracy"] if model.log else None, **extra}, sort_keys=True))


def cmd_train_downstream(cfg, args):
    out = _need_out(args)
    world = _world(cfg, args)
    up = _load_upstream(args.upstream)
    setting = DownstreamSetting(args.n, args.n_t, seed=cfg.seed)
    train = sample_downstream(world.victim, setting)
    model = fine_tune(up.params, train, HeadArch(tuple(args.hidden)), args.init_policy,
                      cfg.downstream.training, seed=cfg.seed, setting=setting)
    path = out if out.suffix == ".ckpt" else out / f"downstream_n{args.n}_nt{args.n_t}_s{cfg.seed}.ckpt"
    path.parent.mkdir(parents=True, exist_ok=True)
    ckptmod.save(model.checkpoint(), path)
    print(path)


def cmd_attack(cfg, args):
    models = [DownstreamModel.from_checkpoint(ckptmod.load(p)) for p in args.model]
    rows = []
    if args.method in ("diff", "var"):
        mask = _mask(args)
        fn = attacks.parameter_difference_test if args.method == "diff" else attacks.variance_test
        for p, m in zip(args.model, models):
            try:
                rows.append(fn(m, mask, model_id=str(p)).to_json())
            except attacks.NotApplicableError as exc:
                rows.append({"method": args.method, "model_id": str(p), "not_applicable": str(exc)})
    elif args.method == "conf":
        probes = read_samples(args.probe_file) if args.probe_file else _world(cfg, args).probe_set
        rows = [attacks.confidence_score_test(attacks.serve_api(m), probes, model_id=str(p)).to_json()
                for p, m in zip(args.model, models)]
    else:
        world = _world(cfg, args)
        first = models[0]
        head = HeadArch(tuple(l.fan_out for l in first.head[:-1]))
        pool = _shadow_pool(cfg, world, args, head, first.init_policy)
        for s in range(cfg.meta.seeds):
            if args.method == "meta-bb":
                probes = read_samples(args.probe_file) if args.probe_file else world.probe_set
                meta = attacks.train_blackbox_meta(pool, cfg.meta.k_queries, True, probes, cfg.meta.training, seed=s)
            else:
                meta = attacks.train_whitebox_meta(pool, cfg.meta.training, seed=s)
            for p, m in zip(args.model, models):
                rec = attacks.meta_score(meta, m, model_id=str(p)).to_json()
                rec["meta_seed"] = s
                rows.append(rec)
    _emit(rows, args.out)


def cmd_defend(cfg, args):
    up = _load_upstream(args.upstream)
    if args.samples:
        samples = read_samples(args.samples)
    else:
        samples = sample_downstream(_world(cfg, args).victim, DownstreamSetting(2000, args.n_t, seed=cfg.seed))
    dc = cfg.defenses
    true_mask = (Mask.from_json(json.loads(args.mask_file.read_text())) if args.mask_file
                 else (up.masks[0] if up.masks else None))
    if args.method == "zero":
        report = defenses.zero_activation_check(up.params, samples.x, dc.epsilon, dc.tau).report()
    elif args.method in harness.OUTLIERS:
        n_t = int(samples.y_t.sum()) or args.n_t
        acts = defenses.extract(up.params, samples.x)
        report = defenses.detect(acts, samples.y_t, n_t, args.method, samples.ids, dc.alpha_que, cfg.seed)
    else:
        if true_mask is None:
            raise harness.ConfigError("probes need a mask size: pass --mask-file")
        probe = defenses.average_value_probe if args.method == "avgprobe" else defenses.intersection_probe
        nonprop = samples.subset(np.flatnonzero(samples.y_t == 0))
        out = probe(up.params, nonprop.x, true_mask.size, true_mask.array)
        report = defenses.DetectionReport(args.method, [], out.get("detection_rate", float("nan")), out)
    text = json.dumps(report.to_json(), sort_keys=True, indent=1)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text + "\n")
    else:
        print(text)


def cmd_sweep(cfg, args):
    res = harness.run_experiment(cfg, _need_out(args), cfg.jobs)
    print(json.dumps({"out": str(res.out_dir), "records": len(res.records), "failures": res.failures}))
    return 2 if res.failures else 0


def cmd_report(cfg, args):
    out = _need_out(args)
    records = harness.load_records(out)
    if not records:
        raise RuntimeError(f"no records in {out}")
    harness.emit_report(records, out, cfg)
    print(out / "auc_summary.csv")


def cmd_calibrate_tau(cfg, args):
    """Calibrate tau on clean upstream models trained from distinct master seeds."""
    models, xs = [], []
    for s in range(args.models):
        c = harness.config_from_dict({**cfg.to_dict(), "seed": cfg.seed + s})
        world = harness.build_world(c)
        model, _, _ = harness.train_variant(c, world, harness.BASELINE)
        models.append(model.params)
        xs.append(world.victim.nonprop.x[:args.samples])
    maxes = [float(defenses.zero_fractions(defenses.extract(m, x), cfg.defenses.epsilon).max())
             for m, x in zip(models, xs)]
    arr = np.array(maxes)
    result = {"tau": float(arr.mean() + 3 * arr.std()), "max_zero_fractions": maxes,
              "epsilon": cfg.defenses.epsilon, "n_models": len(maxes), "n_samples": args.samples,
              "seeds": [cfg.seed + s for s in range(args.models)]}
    text = json.dumps(result, indent=2) + "\n"
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
    print(text, end="")


COMMANDS = {
    "gen-data": cmd_gen_data, "train-upstream": cmd_train_upstream, "train-downstream": cmd_train_downstream,
    "attack": cmd_attack, "defend": cmd_defend, "sweep": cmd_sweep, "report": cmd_report,
    "calibrate-tau": cmd_calibrate_tau,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](cfg, args) or 0
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 2
        log.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        if args.verbose:
            raise
        return 2


if __name__ == "__main__":
    sys.exit(main())
