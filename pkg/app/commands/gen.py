import argparse
import json
from pathlib import Path

from app.errors import FamilySpecError
from app.schemas import FamilySpec
from app.services.family import generate_family
from app.utils import logger


def register(subparsers) -> None:
    parser = subparsers.add_parser("gen", help="generate a synthetic checkpoint family")
    parser.add_argument("out_dir")
    parser.add_argument("--spec", help="family spec JSON file; flags below override its fields")
    parser.add_argument("--k", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--sparsity", type=float)
    parser.add_argument("--kinds", help="comma-separated source kinds: full, explicit-delta, lora")
    parser.add_argument("--delta-scale", type=float)
    parser.add_argument("--lora-rank", type=int)
    parser.add_argument("--block-bytes", type=int)
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    """Generate a family and print the ids of its checkpoints"""
    data = {}
    if args.spec:
        try:
            data = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise FamilySpecError(f"cannot read family spec {args.spec}: {e}")
    overrides = {
        "k": args.k,
        "seed": args.seed,
        "sparsity": args.sparsity,
        "kinds": args.kinds.split(",") if args.kinds else None,
        "delta_scale": args.delta_scale,
        "lora_rank": args.lora_rank,
        "block_bytes": args.block_bytes,
    }
    data.update({key: value for key, value in overrides.items() if value is not None})
    spec = FamilySpec.model_validate(data)
    layout = generate_family(spec, args.out_dir)
    print(f"base {layout.base_id} {layout.base_path}")
    for ref in layout.experts:
        print(f"expert {ref.expert_id} {ref.kind} {ref.checkpoint_id} {ref.path}")
    logger.info(f"Family written to {layout.root}")
    return 0
