"""Command line entry point: gen, train, eval, detect and chat.

Exit codes: 0 on success, 1 for user or configuration errors, 2 when
training or evaluation hits a non-finite value.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import DEFECT_LABELS, load_config
from .errors import ConfigError, DataError, FormatError, InputError, NumericError, UndefinedMetricError

log = logging.getLogger("waferqa")

USER_ERRORS = (ConfigError, DataError, FormatError, InputError, UndefinedMetricError, FileNotFoundError)


def _marks_for(image_path: Path, marks: str | None) -> str:
    """Text marks for an image: explicit flag, else the metadata sidecar of a generated dataset."""
    if marks is not None:
        return marks
    sidecar = image_path.parent.parent / "meta" / (image_path.stem + ".json")
    if sidecar.exists():
        try:
            return str(json.loads(sidecar.read_text()).get("text_marks", ""))
        except json.JSONDecodeError:
            log.warning("unreadable metadata sidecar %s", sidecar)
    return ""


def cmd_gen(args) -> int:
    from .wafersynth import generate_dataset

    cfg = load_config(args.config, seed=args.seed)
    manifest = generate_dataset(cfg.gen, args.out)
    counts = {k: len(v) for k, v in manifest.splits.items()}
    print(f"wrote {sum(counts.values())} samples to {args.out} (seed {cfg.gen.seed}, {counts})")
    return 0


def cmd_train(args) -> int:
    from .trainer import save_checkpoint, train
    from .wafersynth import load_split

    cfg = load_config(args.config, seed=args.seed)
    samples = load_split(args.data, "train")
    out = Path(args.out)

    def progress(rec):
        if rec["step"] % args.log_every == 0:
            log.info("step %d [%s] lr %.2e total %.4f", rec["step"], rec["tag"], rec["lr"], rec["total"])

    result = train(cfg, samples, out_dir=out.parent, progress=progress)
    save_checkpoint(result.model, result.optimizer, result.step, out)
    print(f"trained {result.step} steps; checkpoint {out}; log {out.parent / 'train_log.jsonl'}")
    return 0


def cmd_eval(args) -> int:
    from .evaluate import evaluate, predict
    from .plots import report_figures
    from .trainer import load_checkpoint
    from .wafersynth import load_split

    model, _, _, _ = load_checkpoint(args.ckpt, with_optimizer=False)
    samples = load_split(args.data, "test")
    report = evaluate(model, samples, oracle=args.oracle, with_qa=not args.no_qa, ckpt=args.ckpt)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_json(out)
    csv_path = Path(args.csv) if args.csv else out.with_suffix(".csv")
    report.write_csv(csv_path)
    written = [out, csv_path]
    if not args.no_figures:
        maps = np.stack([s.mask for s in samples]).astype(np.float64) if args.oracle else predict(model, samples).anomaly_maps
        written += report_figures(csv_path.parent, samples, maps, report.qa, DEFECT_LABELS)
    avg = report.average
    print("average  image_auc {image_auc:.4f}  pixel_auc {pixel_auc:.4f}  pro {pro:.4f}  ap {ap:.4f}".format(**avg))
    print(f"pm accuracy {report.pm_accuracy:.4f}")
    if report.qa:
        print("qa " + "  ".join(f"{k} {'n/a' if v is None else f'{v:.1f}'}" for k, v in report.qa.items()))
    for p in written:
        print(f"wrote {p}")
    return 0


def _heat_rgb(anomaly_map: np.ndarray) -> np.ndarray:
    from matplotlib import colormaps

    return (colormaps["jet"](np.clip(anomaly_map, 0, 1))[..., :3] * 255).round().astype(np.uint8)


def cmd_detect(args) -> int:
    import torch
    from PIL import Image

    from .trainer import load_checkpoint
    from .wafersynth import read_image

    model, _, _, _ = load_checkpoint(args.ckpt, with_optimizer=False)
    path = Path(args.image)
    image = read_image(path)
    h, w = model.cfg.gen.height, model.cfg.gen.width
    if image.shape != (h, w):
        raise InputError(f"image is {image.shape[0]}x{image.shape[1]}, checkpoint expects {h}x{w}")
    marks = _marks_for(path, args.marks)
    with torch.no_grad():
        v_img, v_txt = model.encode(image[None], [marks])
        det = model.detect(v_img, v_txt)
    amap = det.mask.anomaly_map[0].numpy().astype("<f4")
    binary = det.mask.binary[0].numpy().astype(np.uint8)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(binary * 255, mode="L").save(f"{prefix}_mask.png")
    Image.fromarray(_heat_rgb(amap), mode="RGB").save(f"{prefix}_heat.png")
    Path(f"{prefix}_map.bin").write_bytes(amap.tobytes())
    Path(f"{prefix}_map.json").write_text(json.dumps({
        "shape": list(amap.shape), "dtype": "float32", "byteorder": "little", "image": str(path),
        "text_marks": marks, "config": model.cfg.to_dict(),
    }, indent=2, sort_keys=True) + "\n")
    label = model.labels[int(det.pm.predicted[0])]
    print(f"class {label}  P_n {float(det.pm.p_n[0]):.4f}  positive pixels {int(binary.sum())}/{binary.size}")
    return 0


def _chat_turn(model, image, marks, question: str, out) -> None:
    from .evaluate import ask

    (text,), (a,) = ask(model, image, marks, [question])
    print(f"{text}\n[a={a:.4f}]", file=out, flush=True)


def cmd_chat(args) -> int:
    from .trainer import load_checkpoint
    from .wafersynth import read_image

    model, _, _, _ = load_checkpoint(args.ckpt, with_optimizer=False)
    image, marks = None, ""
    if args.image:
        path = Path(args.image)
        image = read_image(path)
        marks = _marks_for(path, args.marks)
    if args.question is not None:
        if not args.question.strip():
            raise InputError("empty question")
        _chat_turn(model, image, marks, args.question, sys.stdout)
        return 0
    print("commands: /image PATH, /noimage, /quit", flush=True)
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        if line == "/quit":
            break
        if line == "/noimage":
            image, marks = None, ""
            continue
        if line.startswith("/image"):
            path = Path(line[len("/image"):].strip())
            try:
                image = read_image(path)
                marks = _marks_for(path, args.marks)
                print(f"image {path}", flush=True)
            except DataError as exc:
                print(f"error: {exc}", flush=True)
            continue
        try:
            _chat_turn(model, image, marks, line, sys.stdout)
        except InputError as exc:
            print(f"error: {exc}", flush=True)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="waferqa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train on the train split and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="report JSON path")
    p.add_argument("--csv", help="CSV path (default: report path with .csv)")
    p.add_argument("--oracle", action="store_true", help="score ground-truth masks as anomaly maps")
    p.add_argument("--no-qa", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", help="detect defects in one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--marks", help="text marks (default: dataset metadata sidecar, else empty)")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("chat", help="ask questions about an image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image")
    p.add_argument("--question")
    p.add_argument("--marks")
    p.set_defaults(func=cmd_chat)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except NumericError as exc:
        where = f" (step {exc.step})" if exc.step is not None else ""
        print(f"numeric failure{where}: {exc}", file=sys.stderr)
        return 2
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
