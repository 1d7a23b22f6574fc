from app.services.synthetic import generate_synthetic_corpus


def run(args) -> int:
    manifest = generate_synthetic_corpus(
        args.out, n_images=args.n_images, size=args.size, seed=args.seed, max_shapes=args.max_shapes,
        repeat_kinds=args.repeat_kinds,
    )
    print(f"OK: {args.n_images} samples, manifest {manifest}")
    return 0


def register(subparsers) -> None:
    p = subparsers.add_parser("synthesize", help="Generate the colored-shape toy corpus.")
    p.add_argument("--out", required=True)
    p.add_argument("--n-images", type=int, default=200)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-shapes", type=int, default=3)
    p.add_argument("--repeat-kinds", action="store_true", help="Allow several shapes of one kind per image.")
    p.set_defaults(handler=run, accepts_overrides=False)
