"""Command-line entry points: train, eval, serve, gen."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .model import ModelConfig
from .scenegen import SceneConfig, generate_scenes, save_dataset
from .training import TrainConfig


def _load_train_config(path: str) -> tuple[TrainConfig, ModelConfig]:
    with open(path) as f:
        raw = json.load(f)
    scene = SceneConfig(**{
        k: tuple(v) if isinstance(v, list) else v
        for k, v in raw.get("scene", {}).items()
    })
    train = TrainConfig(scene=scene, **raw.get("train", {}))
    model = ModelConfig(**raw.get("model", {}))
    return train, model


def cmd_train(args) -> int:
    from .training import train

    if args.config:
        train_cfg, model_cfg = _load_train_config(args.config)
    else:
        train_cfg, model_cfg = TrainConfig(), ModelConfig()
    ckpt, curve = train(
        train_cfg,
        model_cfg,
        out_dir=args.out,
        deterministic=args.deterministic,
    )
    print(f"checkpoint: {ckpt}")
    print(f"final loss: {curve[-1]['total']:.4f} after {len(curve)} steps")
    return 0


def cmd_eval(args) -> int:
    from .evalbench import ModelBackend, emit_report, k_shot_eval
    from .scenegen import load_dataset

    dataset = load_dataset(args.dataset)
    backend = ModelBackend.from_checkpoint(args.checkpoint)
    report = k_shot_eval(dataset, backend, k=args.shots, threshold=args.threshold)
    json_path, text_path = emit_report(report, args.out)
    print(Path(text_path).read_text())
    print(f"report written to {json_path}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .model import load_checkpoint
    from .service import create_app

    model = load_checkpoint(args.checkpoint)
    app = create_app(
        model,
        default_threshold=args.threshold,
        cors_origin=args.cors_origin,
    )
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def cmd_gen(args) -> int:
    cfg_kwargs = {}
    if args.scene_config:
        with open(args.scene_config) as f:
            cfg_kwargs = {
                k: tuple(v) if isinstance(v, list) else v
                for k, v in json.load(f).items()
            }
    cfg = SceneConfig(seed=args.seed, **cfg_kwargs)
    scenes = generate_scenes(cfg, args.count)
    root = save_dataset(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {root}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="promptcount")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model on synthetic scenes")
    p_train.add_argument("--config", help="JSON file with train/model/scene sections")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--deterministic", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="k-shot exemplar evaluation")
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--shots", type=int, choices=(1, 2, 3), default=1)
    p_eval.add_argument("--threshold", type=float, default=0.3)
    p_eval.add_argument("--out", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_serve = sub.add_parser("serve", help="run the HTTP service")
    p_serve.add_argument("--checkpoint", required=True)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8000)
    p_serve.add_argument("--threshold", type=float, default=None)
    p_serve.add_argument("--cors-origin", default=None)
    p_serve.set_defaults(func=cmd_serve)

    p_gen = sub.add_parser("gen", help="generate a synthetic dataset")
    p_gen.add_argument("--count", type=int, default=100)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--scene-config", help="JSON SceneConfig overrides")
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=cmd_gen)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
