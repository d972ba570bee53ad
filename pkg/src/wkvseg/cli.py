"""Command-line entry point: benchmarks, parameter counts, gradient checks
and the toy training/evaluation runs."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

from threadpoolctl import threadpool_limits

PARAM_TOLERANCE = 0.15


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True)


def _exponent_or_none(records):
    from .bench import scaling_exponent
    return scaling_exponent(records) if len(records) >= 3 else None


def cmd_bench_wkv(args) -> int:
    from .bench import bench, wkv_ops, write_csv

    ops_ = wkv_ops()
    scan_sizes = [2 ** e for e in range(args.min_log2_len, args.max_log2_len + 1)]
    ref_top = min(args.max_log2_len, args.ref_max_log2_len)
    ref_sizes = [2 ** e for e in range(args.min_log2_len, ref_top + 1)]
    with threadpool_limits(limits=args.threads):
        records = bench(ops_["bi_wkv_scan"], scan_sizes, args.repeats, args.channels, args.seed)
        ref = []
        if len(ref_sizes) >= 3:
            ref = bench(ops_["bi_wkv_reference"], ref_sizes, args.repeats, args.channels, args.seed)
    write_csv(args.out, records + ref)
    print(_dump({
        "bi_wkv_scan": {"exponent": _exponent_or_none(records), "tokens": [r.input_tokens for r in records]},
        "bi_wkv_reference": {"exponent": _exponent_or_none(ref), "tokens": [r.input_tokens for r in ref]},
    }))
    return 0


def cmd_bench_backbone(args) -> int:
    from .bench import backbone_op, bench, write_csv

    res = sorted(int(r) for r in args.resolutions.split(","))
    with threadpool_limits(limits=args.threads):
        records = bench(backbone_op(args.variant, args.seed), [r * r for r in res], args.repeats,
                        channels=3, seed=args.seed)
    write_csv(args.out, records)
    print(_dump({f"backbone_{args.variant}": {"exponent": _exponent_or_none(records),
                                              "resolutions": res}}))
    return 0


def cmd_params(args) -> int:
    from .backbone import REFERENCE_PARAMS, BackboneConfig, build_backbone, param_count

    variants = sorted(REFERENCE_PARAMS) if args.variant == "all" else [args.variant]
    ok = True
    for v in variants:
        n = param_count(build_backbone(BackboneConfig.from_variant(v)))
        target = REFERENCE_PARAMS[v]
        rel = n / target - 1.0
        passed = abs(rel) <= PARAM_TOLERANCE
        ok &= passed
        print(f"variant={v} params={n} ({n / 1e6:.2f}M) target={target / 1e6:.1f}M "
              f"rel_diff={rel:+.1%} {'PASS' if passed else 'FAIL'}")
    return 0 if ok else 1


def cmd_gradcheck(args) -> int:
    from .gradsuite import cases

    failed = 0
    for case in cases(args.suite):
        for r in case.run(args.step):
            status = "PASS" if r.passed(args.tol) else "FAIL"
            failed += status == "FAIL"
            print(f"{status} {r.name:48s} rel_err={r.max_rel_error:.3e} n={r.checked}")
    print(f"{'FAILED' if failed else 'OK'}: {failed} failing check(s), tolerance {args.tol:g}")
    return 1 if failed else 0


def _write_distill_log(path: Path, curve) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "mse"])
        for i, v in enumerate(curve):
            w.writerow([i, f"{v:.8g}"])


def cmd_train_toy(args) -> int:
    from .backbone import BackboneConfig, build_backbone
    from .core import save_checkpoint
    from .head import SegmentationModel
    from .scenes import gen_scene
    from .training import TrainConfig, batch_loss, distill_session, evaluate, exact_prompts, fit

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = gen_scene(args.seed, args.size, args.instances)
    model = SegmentationModel(BackboneConfig.from_variant(args.variant), seed=args.seed)
    cfg = TrainConfig(lr=args.lr, steps=args.steps, seed=args.seed, optimizer=args.optimizer,
                      jitter=0.0 if args.no_jitter else 0.05, checkpoint_every=args.checkpoint_every)

    if args.distill_steps:
        teacher = build_backbone(model.cfg, args.seed + 1)
        scenes = [gen_scene(args.seed + 100 + i, args.size, args.instances) for i in range(4)]
        dcfg = TrainConfig(lr=args.lr, steps=args.distill_steps, seed=args.seed, optimizer=args.optimizer)
        _write_distill_log(out / "distill_log.csv", distill_session(model.backbone, teacher, scenes, dcfg))

    def clean_loss() -> float:
        return batch_loss(model, scene.image, exact_prompts(scene), cfg).total.item()

    initial = clean_loss()
    fit(model, [scene], cfg, log_path=out / "train_log.csv", ckpt_dir=out)
    metrics = evaluate(model, [scene])
    metrics.update(initial_loss=initial, final_loss=clean_loss())
    meta = {"model": model.meta(), "train": asdict(cfg),
            "scene": {"seed": args.seed, "size": args.size, "instances": args.instances}}
    save_checkpoint(out / "final.wsck", model.state_dict(), meta)
    (out / "metrics.json").write_text(_dump(metrics) + "\n")
    print(_dump(metrics))
    return 0


def cmd_eval_toy(args) -> int:
    from .core import load_checkpoint
    from .head import SegmentationModel, mask_record
    from .scenes import gen_scene
    from .training import evaluate, exact_prompts

    arrays, meta = load_checkpoint(args.checkpoint)
    model = SegmentationModel.from_meta(meta["model"])
    model.load_state_dict(arrays)
    info = meta.get("scene", {})
    seed = info.get("seed", 0) if args.seed is None else args.seed
    size = info.get("size", 64) if args.size is None else args.size
    n = info.get("instances", 5)
    scenes = [gen_scene(seed + i, size, n) for i in range(args.scenes)]
    metrics = evaluate(model, scenes)
    metrics["scenes"] = args.scenes
    if args.masks_out:
        with open(args.masks_out, "w") as f:
            for i, scene in enumerate(scenes):
                prompts = exact_prompts(scene)
                outs = model.predict(scene.image, [p for p, _ in prompts])
                for o, (p, _) in zip(outs, prompts):
                    f.write(json.dumps(mask_record(f"scene-{seed + i}", p, o.logits.data[0])) + "\n")
    print(_dump(metrics))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wkvseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench-wkv", help="time the linear scan and the quadratic reference")
    p.add_argument("--min-log2-len", type=int, default=10)
    p.add_argument("--max-log2-len", type=int, default=16)
    p.add_argument("--ref-max-log2-len", type=int, default=12,
                   help="largest length timed for the quadratic reference")
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--repeats", type=int, default=9)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="bench.csv")
    p.set_defaults(func=cmd_bench_wkv)

    p = sub.add_parser("bench-backbone", help="time backbone inference across resolutions")
    p.add_argument("--variant", choices=["T", "S", "B"], default="S")
    p.add_argument("--resolutions", default="256,512,1024")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="bench.csv")
    p.set_defaults(func=cmd_bench_backbone)

    p = sub.add_parser("params", help="backbone parameter counts against published sizes")
    p.add_argument("--variant", choices=["T", "S", "B", "all"], default="all")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--suite", choices=["all", "core", "wkv", "blocks", "head"], default="all")
    p.add_argument("--precision", type=int, choices=[64], default=64)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=3e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-toy", help="overfit one synthetic scene")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--variant", choices=["T", "S", "B"], default="T")
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--optimizer", choices=["sgd", "adam"], default="sgd")
    p.add_argument("--no-jitter", action="store_true", help="use exact boxes during training")
    p.add_argument("--checkpoint-every", type=int, default=100)
    p.add_argument("--distill-steps", type=int, default=0,
                   help="feature-distillation steps against a frozen random teacher first")
    p.add_argument("--out", default="run")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("eval-toy", help="evaluate a checkpoint on synthetic scenes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--seed", type=int, default=None, help="first scene seed (default: training seed)")
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--masks-out", default=None, help="write per-prompt RLE mask records (JSON lines)")
    p.set_defaults(func=cmd_eval_toy)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
